use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use wsd_core::bags::{write_bag, Bag};
use wsd_core::cli::heatmap::parse_pgm;
use wsd_core::cli::RunReport;
use wsd_core::diff::Tensor;
use wsd_core::models::{HeadKind, MilModel, ModelConfig};

fn wsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsd"))
        .args(args)
        .env_remove("WSD_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small cohort shared by the training tests.
fn dataset() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let data = dir.join("data");
        let out = wsd(&[
            "gen-synthetic",
            "--out",
            s(&data),
            "--slides",
            "60",
            "--dim",
            "8",
            "--seed",
            "3",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        data
    })
}

const SMALL: [&str; 6] = ["--hidden", "16", "--attention-dim", "8", "--epochs", "2"];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(dataset()),
        "--out",
        s(out),
        "--bootstrap",
        "100",
    ];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    wsd(&args)
}

fn write_manifest(dir: &Path, rows: &[(&str, &str, &str, &str)]) -> PathBuf {
    let mut text = String::from("#slide_id\tbag_path\texpert\tnonexpert\tsplit\n");
    for (id, e, ne, split) in rows {
        text.push_str(&format!("{id}\tbags/{id}.wsdb\t{e}\t{ne}\t{split}\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, text).unwrap();
    path
}

fn stats_row<'a>(table: &'a str, name: &str) -> Vec<&'a str> {
    table
        .lines()
        .find(|l| l.starts_with(&format!("{name}\t")))
        .unwrap()
        .split('\t')
        .skip(2)
        .collect()
}

#[test]
fn gen_synthetic_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = wsd(&[
            "gen-synthetic",
            "--out",
            s(out),
            "--slides",
            "12",
            "--dim",
            "4",
            "--seed",
            "9",
        ]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains("homogeneous"));
    }
    assert_eq!(
        fs::read(a.join("manifest.tsv")).unwrap(),
        fs::read(b.join("manifest.tsv")).unwrap()
    );
    let bags: Vec<_> = fs::read_dir(a.join("bags"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(bags.len(), 12);
    for name in bags {
        assert_eq!(
            fs::read(a.join("bags").join(&name)).unwrap(),
            fs::read(b.join("bags").join(&name)).unwrap()
        );
    }
}

#[test]
fn zero_slides_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&wsd(&[
            "gen-synthetic",
            "--out",
            s(dir.path()),
            "--slides",
            "0"
        ])),
        2
    );
}

#[test]
fn consensus_stats_of_identical_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(
        dir.path(),
        &[
            ("a", "3+4", "3+4", "train"),
            ("b", "benign", "benign", "val"),
            ("c", "5+5", "5+5", "test"),
        ],
    );
    let out = wsd(&["consensus-stats", "--data", s(&m)]);
    assert_eq!(code(&out), 0);
    assert_eq!(stats_row(&stdout(&out), "All"), ["100.0", "0.0", "0.0"]);
}

#[test]
fn consensus_stats_of_the_three_reference_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(
        dir.path(),
        &[
            ("a", "3+4", "4+3", "train"),
            ("b", "4+4", "3+4", "train"),
            ("c", "4+5", "4+3", "train"),
        ],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_wsd"))
        .args(["consensus-stats"])
        .env("WSD_DATA_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(stats_row(&text, "All"), ["33.3", "33.3", "33.3"]);
    assert_eq!(stats_row(&text, "Gleason 3"), ["-", "-", "-"]);
}

#[test]
fn consensus_stats_lists_missing_scores() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(
        dir.path(),
        &[
            ("a", "3+4", "-", "train"),
            ("b", "3+3", "3+3", "val"),
            ("c", "4+4", "-", "test"),
        ],
    );
    let out = wsd(&["consensus-stats", "--data", s(&m)]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("a, c"), "{err}");
}

#[test]
fn train_then_eval_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = train(&run, &["--model", "gated-abmil"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = RunReport::read(&run.join("report.toml")).unwrap();
    assert_eq!(report.seeds, [13, 37]);
    assert!(run.join("seed-13.params.json").exists());
    let history = fs::read_to_string(run.join("seed-37.history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let eval = wsd_core::cli::evaluate_run(&eval_args(&run, None)).unwrap();
    assert_eq!(eval.reproduced, Some(true));
    let stored = wsd_core::metrics::MetricReport::from(&report.summary);
    assert_eq!(eval.metrics, stored);
}

fn eval_args(report: &Path, compare: Option<&Path>) -> wsd_core::cli::EvalArgs {
    wsd_core::cli::EvalArgs {
        report: Some(report.to_path_buf()),
        params: None,
        data: None,
        compare: compare.map(Path::to_path_buf),
        permutations: 2000,
        statistic: "balanced-accuracy".into(),
        seed: 0,
        bootstrap: 100,
    }
}

#[test]
fn baseline_equals_unit_weighted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&a, &["--seeds", "5"])), 0);
    let unit = [
        "--seeds",
        "5",
        "--method",
        "weighted",
        "--weights",
        "1,1,1",
        "--allow-weights-out-of-range",
    ];
    assert_eq!(code(&train(&b, &unit)), 0);
    let (ra, rb) = (
        RunReport::read(&a.join("report.toml")).unwrap(),
        RunReport::read(&b.join("report.toml")).unwrap(),
    );
    assert_eq!(ra.summary, rb.summary);
    assert_eq!(ra.runs[0].test_predictions, rb.runs[0].test_predictions);
    assert_eq!(
        fs::read(a.join("seed-5.params.json")).unwrap(),
        fs::read(b.join("seed-5.params.json")).unwrap()
    );

    let out = wsd(&[
        "eval",
        "--report",
        s(&a),
        "--compare",
        s(&b),
        "--permutations",
        "500",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("p-value\t1.0000"), "{text}");
    assert!(!text.contains(" *"), "{text}");
}

#[test]
fn single_seed_mean_is_that_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("one");
    assert_eq!(
        code(&train(&run, &["--seeds", "13", "--model", "maxmil"])),
        0
    );
    let r = RunReport::read(&run.join("report.toml")).unwrap();
    assert_eq!(r.runs.len(), 1);
    assert_eq!(
        r.summary.balanced_accuracy,
        r.runs[0].test.balanced_accuracy
    );
    assert_eq!(r.summary.weighted_f1, r.runs[0].test.weighted_f1);
}

#[test]
fn config_errors_exit_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("never");
    for extra in [
        &["--method", "weighted", "--weights", "1,1,1"][..],
        &["--model", "transmil"],
        &["--lr", "0"],
        &["--weights", "4,3"],
        &["--method", "sometimes"],
    ] {
        let out = train(&run, extra);
        assert_eq!(code(&out), 2, "{extra:?}");
    }
    assert!(!run.exists());
}

#[test]
fn eval_rejects_mismatched_slide_sets() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert_eq!(code(&train(&a, &["--seeds", "2", "--model", "maxmil"])), 0);
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    let mut r = RunReport::read(&a.join("report.toml")).unwrap();
    r.test_slides.reverse();
    r.write(&other.join("report.toml")).unwrap();
    let out = wsd(&["eval", "--report", s(&a), "--compare", s(&other)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("slide sets differ"));
}

#[test]
fn grid_marks_the_selected_column() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("grid.tsv");
    let mut args = vec![
        "grid",
        "--data",
        s(dataset()),
        "--seeds",
        "1",
        "--grid-ab",
        "(1,0)",
        "--out",
        s(&table),
    ];
    args.extend_from_slice(&SMALL);
    let out = wsd(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "metric\t(1,0)*");
    assert!(lines[1].starts_with("Bal. Acc.\t"));
    assert!(lines[2].starts_with("W. F1-Score\t"));
    assert_eq!(code(&wsd(&["grid", "--data", s(dataset())])), 2);
}

fn checkpoint(dir: &Path, dim: usize) -> PathBuf {
    let model = MilModel::init(
        ModelConfig::new(HeadKind::Abmil, dim)
            .with_sizes(8, 4)
            .with_seed(2),
    )
    .unwrap();
    let path = dir.join("m.json");
    model.save(&path).unwrap();
    path
}

fn bag_file(dir: &Path, coords: Vec<(i32, i32)>) -> PathBuf {
    let n = coords.len();
    let data = (0..n * 3).map(|i| (i as f64 * 0.37).sin()).collect();
    let bag = Bag {
        slide_id: "probe".into(),
        features: Tensor::matrix(n, 3, data).unwrap(),
        coords,
    };
    let path = dir.join("probe.wsdb");
    write_bag(&bag, &path).unwrap();
    path
}

#[test]
fn attention_map_single_patch_is_bright() {
    let dir = tempfile::tempdir().unwrap();
    let (params, bag) = (
        checkpoint(dir.path(), 3),
        bag_file(dir.path(), vec![(4, 7)]),
    );
    let prefix = dir.path().join("maps/one");
    let out = wsd(&[
        "attn-map",
        "--params",
        s(&params),
        "--bag",
        s(&bag),
        "--out",
        s(&prefix),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (w, h, px) = parse_pgm(&fs::read(dir.path().join("maps/one.pgm")).unwrap()).unwrap();
    assert_eq!((w, h, px), (1, 1, vec![255]));
}

#[test]
fn attention_table_top_matches_brightest_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let coords: Vec<(i32, i32)> = (0..12)
        .map(|i| (i % 4 + 10, i / 4 - 1))
        .filter(|c| *c != (11, 0))
        .collect();
    let (params, bag) = (checkpoint(dir.path(), 3), bag_file(dir.path(), coords));
    let prefix = dir.path().join("m");
    assert_eq!(
        code(&wsd(&[
            "attn-map",
            "--params",
            s(&params),
            "--bag",
            s(&bag),
            "--out",
            s(&prefix)
        ])),
        0
    );
    let table = fs::read_to_string(dir.path().join("m.tsv")).unwrap();
    let top: Vec<i32> = table
        .lines()
        .filter(|l| !l.starts_with('#'))
        .nth(1)
        .unwrap()
        .split('\t')
        .take(2)
        .map(|v| v.parse().unwrap())
        .collect();
    let (w, h, px) = parse_pgm(&fs::read(dir.path().join("m.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (4, 3));
    let brightest = (0..px.len())
        .max_by_key(|&i| (px[i], std::cmp::Reverse(i)))
        .unwrap();
    assert_eq!(px[brightest], 255);
    assert_eq!(px[4 + 1], 0, "cell (11, 0) has no patch");
    assert_eq!(
        px[((top[1] + 1) as usize) * 4 + (top[0] - 10) as usize],
        255
    );
}

#[test]
fn attention_map_rejects_coordinate_collisions() {
    let dir = tempfile::tempdir().unwrap();
    let (params, bag) = (
        checkpoint(dir.path(), 3),
        bag_file(dir.path(), vec![(0, 0), (1, 1), (0, 0)]),
    );
    let out = wsd(&[
        "attn-map",
        "--params",
        s(&params),
        "--bag",
        s(&bag),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("share grid coordinate"));
}

#[test]
fn attention_map_dimension_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (params, bag) = (
        checkpoint(dir.path(), 5),
        bag_file(dir.path(), vec![(0, 0)]),
    );
    let out = wsd(&[
        "attn-map",
        "--params",
        s(&params),
        "--bag",
        s(&bag),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), 3);
}
