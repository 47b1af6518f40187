use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::heatmap::{attention_table, Heatmap};
use super::report::{
    report_path, sha256_hex, Metrics, RunReport, SeedRun, REPORT_FILE, SCHEMA_VERSION,
};
use super::{
    AttnArgs, CliError, DataArgs, EvalArgs, GenArgs, GridArgs, LossArgs, ModelArgs, TrainArgs,
};
use crate::bags::manifest::MANIFEST_FILE;
use crate::bags::synth::REFERENCE_CONSENSUS;
use crate::bags::{
    generate_synthetic, parse_manifest, parse_manifest_lenient, read_bag, Manifest, Split,
    SynthConfig,
};
use crate::gleason::{consensus_level, ConsensusLevel, SlideClass, WeightTriple};
use crate::metrics::{
    paired_permutation_test, seed_mean_report, MetricReport, PairedOutcomes, Statistic,
};
use crate::models::{extract_attention, HeadKind, MilModel, ModelConfig, PatchWeights};
use crate::training::{
    default_alpha_beta_grid, default_lr_grid, default_weight_grid, evaluate, grid_search,
    load_split, parse_tuples, predict_all, train, GridPoint, Method, Sample, TrainConfig,
};

pub const CI_LEVEL: f64 = 0.95;
pub const BOOTSTRAP_SEED: u64 = 0;

struct Dataset {
    manifest: Manifest,
    path: PathBuf,
    sha256: String,
}

fn manifest_file(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(data: &Path, lenient: bool) -> Result<Dataset, CliError> {
    let path = manifest_file(data);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Data(format!("{}: not UTF-8", path.display())))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = if lenient {
        parse_manifest_lenient(&text, root)?
    } else {
        parse_manifest(&text, root)?
    };
    Ok(Dataset {
        manifest,
        sha256: sha256_hex(text.as_bytes()),
        path,
    })
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

pub fn run_gen_synthetic(a: &GenArgs) -> Result<String, CliError> {
    let config = SynthConfig {
        feature_dim: a.dim,
        seed: a.seed,
        size_factor: a.size_factor,
        ..SynthConfig::default()
    }
    .with_total(a.slides as usize);
    let summary = generate_synthetic(&config, &a.out)?;
    let achieved = summary.percentages();
    let mut out = format!(
        "wrote {} slides ({} train, {} val, {} test) to {}\n",
        config.total(),
        config.n_train,
        config.n_val,
        config.n_test,
        summary.manifest_path.display()
    );
    out.push_str("consensus\tachieved\ttarget\n");
    for level in ConsensusLevel::ALL {
        let i = level.index();
        let _ = writeln!(
            out,
            "{level}\t{:.1}\t{:.1}",
            achieved[i], REFERENCE_CONSENSUS[i]
        );
    }
    for w in &summary.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    Ok(out)
}

/// Consensus level percentages overall and per expert class.
pub fn consensus_table(manifest: &Manifest) -> Result<String, CliError> {
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| e.nonexpert_score.is_none())
        .map(|e| e.slide_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingNonExpert(missing));
    }
    if manifest.entries.is_empty() {
        return Err(CliError::Data("manifest has no entries".into()));
    }
    let mut counts = [[0usize; 3]; 5];
    for e in &manifest.entries {
        let level = consensus_level(e.expert_score, e.nonexpert_score.expect("checked above"));
        counts[0][level.index()] += 1;
        counts[1 + e.label().index()][level.index()] += 1;
    }
    let mut out = String::from("class\tn");
    for level in ConsensusLevel::ALL {
        let _ = write!(out, "\t{level}");
    }
    out.push('\n');
    let names = std::iter::once("All").chain(SlideClass::ALL.iter().map(|c| c.label()));
    for (name, row) in names.zip(counts) {
        let n: usize = row.iter().sum();
        let _ = write!(out, "{name}\t{n}");
        for c in row {
            if n == 0 {
                out.push_str("\t-");
            } else {
                let _ = write!(out, "\t{:.1}", 100.0 * c as f64 / n as f64);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub(super) fn run_consensus_stats(a: &DataArgs) -> Result<String, CliError> {
    consensus_table(&load_dataset(&a.data, true)?.manifest)
}

fn parse_weights(text: &str) -> Result<WeightTriple, CliError> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| {
            CliError::Usage(format!(
                "--weights {text:?}: expected three comma-separated numbers"
            ))
        })?;
    match values[..] {
        [nc, hec, hoc] => Ok(WeightTriple::new(nc, hec, hoc)),
        _ => Err(CliError::Usage(format!(
            "--weights {text:?}: expected three comma-separated numbers"
        ))),
    }
}

/// Builds and validates the training and model configurations from flags.
/// `input_dim` is filled in later from the data.
pub(super) fn resolve_configs(
    model: &ModelArgs,
    loss: &LossArgs,
) -> Result<(TrainConfig, ModelConfig), CliError> {
    let head: HeadKind = model.model.parse()?;
    let method: Method = loss.method.parse()?;
    if loss.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let config = TrainConfig {
        method,
        alpha: loss.alpha,
        beta: loss.beta,
        weights: parse_weights(&loss.weights)?,
        allow_weights_out_of_range: loss.allow_weights_out_of_range,
        learning_rate: loss.lr,
        epochs: loss.epochs,
        seed: loss.seeds[0],
    };
    let model_config = ModelConfig::new(head, 1)
        .with_sizes(model.hidden, model.attention_dim)
        .with_regression(method == Method::MultiTask);
    model_config.validate()?;
    config.validate(&model_config)?;
    Ok((config, model_config))
}

struct Splits {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_splits(manifest: &Manifest) -> Result<Splits, CliError> {
    let splits = Splits {
        train: load_split(manifest, Split::Train)?,
        val: load_split(manifest, Split::Val)?,
        test: load_split(manifest, Split::Test)?,
    };
    for (name, s) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if s.is_empty() {
            return Err(CliError::Data(format!("{name} split is empty")));
        }
    }
    Ok(splits)
}

fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label.index()).collect()
}

fn metric_lines(report: &MetricReport) -> String {
    let (ba, f1) = report.display_cells();
    format!("Bal. Acc.\t{ba}\nW. F1-Score\t{f1}\n")
}

pub fn run_train(a: &TrainArgs) -> Result<(RunReport, String), CliError> {
    let (config, model_config) = resolve_configs(&a.model, &a.loss)?;
    let data = load_dataset(&a.data.data, false)?;
    let splits = load_splits(&data.manifest)?;
    let model_config = ModelConfig {
        input_dim: splits.train[0].bag.dim(),
        ..model_config
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;

    let truth = labels(&splits.test);
    let mut runs = Vec::with_capacity(a.loss.seeds.len());
    for &seed in &a.loss.seeds {
        log::info!("training seed {seed}");
        let model = MilModel::init(model_config.with_seed(seed))?;
        let outcome = train(
            &TrainConfig {
                seed,
                ..config.clone()
            },
            model,
            &splits.train,
            &splits.val,
        )?;

        let params_file = format!("seed-{seed}.params.json");
        outcome.best.save(a.out.join(&params_file))?;
        let history_file = format!("seed-{seed}.history.jsonl");
        let history: String = outcome
            .history
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect();
        let history_path = a.out.join(&history_file);
        fs::write(&history_path, history).map_err(|e| CliError::io(&history_path, e))?;

        let (predictions, test) = evaluate(&outcome.best, &splits.test)?;
        runs.push(SeedRun {
            seed,
            best_epoch: outcome.best_epoch,
            val_balanced_accuracy: outcome.best_record().val_balanced_accuracy,
            params_file,
            history_file,
            test: Metrics::from(&test),
            test_predictions: predictions,
        });
    }

    let predictions: Vec<Vec<usize>> = runs.iter().map(|r| r.test_predictions.clone()).collect();
    let summary = seed_mean_report(&truth, &predictions, a.bootstrap, CI_LEVEL, BOOTSTRAP_SEED)?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        manifest: data.path.clone(),
        manifest_sha256: data.sha256,
        seeds: a.loss.seeds.clone(),
        bootstrap_resamples: a.bootstrap,
        bootstrap_seed: BOOTSTRAP_SEED,
        train: config,
        model: model_config,
        test_slides: splits.test.iter().map(|s| s.bag.slide_id.clone()).collect(),
        test_labels: truth,
        summary: Metrics::from(&summary),
        runs,
    };
    let path = a.out.join(REPORT_FILE);
    report.write(&path)?;

    let mut out = format!(
        "{} {} on {} test slides, seeds {:?}\n",
        report.train.method,
        report.model.head,
        report.test_slides.len(),
        report.seeds
    );
    for r in &report.runs {
        let _ = writeln!(
            out,
            "seed {}: best epoch {}, test bal. acc. {}",
            r.seed,
            r.best_epoch,
            pct(r.test.balanced_accuracy)
        );
    }
    out.push_str(&metric_lines(&summary));
    let _ = writeln!(out, "wrote {}", path.display());
    Ok((report, out))
}

fn grid_points(a: &GridArgs) -> Result<Vec<GridPoint>, CliError> {
    let given = [&a.grid_ab, &a.grid_w, &a.grid_lr]
        .iter()
        .filter(|g| g.is_some())
        .count();
    if given != 1 {
        return Err(CliError::Usage(
            "pass exactly one of --grid-ab, --grid-w or --grid-lr".into(),
        ));
    }
    let points = if let Some(text) = &a.grid_ab {
        if text.trim().is_empty() {
            default_alpha_beta_grid()
        } else {
            parse_tuples(text, 2)?
                .into_iter()
                .map(|v| GridPoint::AlphaBeta {
                    alpha: v[0],
                    beta: v[1],
                })
                .collect()
        }
    } else if let Some(text) = &a.grid_w {
        if text.trim().is_empty() {
            default_weight_grid()
        } else {
            parse_tuples(text, 3)?
                .into_iter()
                .map(|v| GridPoint::Weights(WeightTriple::new(v[0], v[1], v[2])))
                .collect()
        }
    } else {
        let text = a.grid_lr.as_deref().unwrap_or_default();
        if text.trim().is_empty() {
            default_lr_grid()
        } else {
            parse_tuples(text, 1)?
                .into_iter()
                .map(|v| GridPoint::LearningRate(v[0]))
                .collect()
        }
    };
    if points.is_empty() {
        return Err(CliError::Usage("grid is empty".into()));
    }
    Ok(points)
}

pub fn run_grid(a: &GridArgs) -> Result<String, CliError> {
    let points = grid_points(a)?;
    let (config, model_config) = resolve_configs(&a.model, &a.loss)?;
    for p in &points {
        let cfg = p.apply(&config);
        cfg.validate(&model_config.with_regression(cfg.method == Method::MultiTask))?;
    }
    let data = load_dataset(&a.data.data, false)?;
    let splits = load_splits(&data.manifest)?;
    let model_config = ModelConfig {
        input_dim: splits.train[0].bag.dim(),
        ..model_config
    };
    let table = grid_search(
        &points,
        &config,
        &model_config,
        &a.loss.seeds,
        &splits.train,
        &splits.val,
    )?;
    let text = table.render();
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(|e| CliError::io(out, e))?;
    }
    Ok(text)
}

/// Result of `wsd eval`.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub metrics: MetricReport,
    /// Whether recomputed test predictions match the report's (report mode only).
    pub reproduced: Option<bool>,
    pub text: String,
}

pub fn run_eval(a: &EvalArgs) -> Result<String, CliError> {
    evaluate_run(a).map(|o| o.text)
}

pub fn evaluate_run(a: &EvalArgs) -> Result<EvalOutput, CliError> {
    let statistic: Statistic = a.statistic.parse()?;
    if a.compare.is_some() && a.permutations == 0 {
        return Err(CliError::Usage("--permutations must be >= 1".into()));
    }
    match (&a.report, &a.params) {
        (Some(report), _) => eval_report(a, &report_path(report), statistic),
        (None, Some(params)) => eval_params(a, params),
        (None, None) => Err(CliError::Usage("pass --report or --params".into())),
    }
}

fn eval_params(a: &EvalArgs, params: &Path) -> Result<EvalOutput, CliError> {
    let data = a.data.as_deref().ok_or_else(|| {
        CliError::Usage("--data (or WSD_DATA_ROOT) is required with --params".into())
    })?;
    let model = MilModel::load(params)?;
    let dataset = load_dataset(data, true)?;
    let test = load_split(&dataset.manifest, Split::Test)?;
    if test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let predictions = predict_all(&model, &test)?;
    let metrics = seed_mean_report(
        &labels(&test),
        &[predictions],
        a.bootstrap,
        CI_LEVEL,
        BOOTSTRAP_SEED,
    )?;
    let mut text = format!("{} on {} test slides\n", params.display(), test.len());
    text.push_str(&metric_lines(&metrics));
    text.push_str(&metrics.per_class_table());
    Ok(EvalOutput {
        metrics,
        reproduced: None,
        text,
    })
}

fn eval_report(a: &EvalArgs, path: &Path, statistic: Statistic) -> Result<EvalOutput, CliError> {
    let report = RunReport::read(path)?;
    let run_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let data = a.data.clone().unwrap_or_else(|| report.manifest.clone());
    let dataset = load_dataset(&data, true)?;
    let mut notes = String::new();
    if dataset.sha256 != report.manifest_sha256 {
        log::warn!("manifest fingerprint differs from the report's");
        notes.push_str("warning: manifest fingerprint differs from the report's\n");
    }
    let test = load_split(&dataset.manifest, Split::Test)?;
    let slides: Vec<&str> = test.iter().map(|s| s.bag.slide_id.as_str()).collect();
    if slides != report.test_slides {
        return Err(CliError::Data(format!(
            "test split of {} does not match the slides in {}",
            dataset.path.display(),
            path.display()
        )));
    }
    let truth = labels(&test);
    let mut predictions = Vec::with_capacity(report.runs.len());
    for run in &report.runs {
        let model = MilModel::load(run_dir.join(&run.params_file))?;
        predictions.push(predict_all(&model, &test)?);
    }
    let reproduced = predictions == report.test_predictions();
    let mut metrics = seed_mean_report(
        &truth,
        &predictions,
        report.bootstrap_resamples,
        report.summary.ci_level.unwrap_or(CI_LEVEL),
        report.bootstrap_seed,
    )?;

    let mut compare_line = None;
    if let Some(other) = &a.compare {
        let other_path = report_path(other);
        let other_report = RunReport::read(&other_path)?;
        if other_report.test_slides != report.test_slides {
            return Err(CliError::Data(format!(
                "slide sets differ between {} and {}",
                path.display(),
                other_path.display()
            )));
        }
        if other_report.runs.len() != predictions.len() {
            return Err(CliError::Data(format!(
                "{} has {} seeds but {} has {}",
                path.display(),
                predictions.len(),
                other_path.display(),
                other_report.runs.len()
            )));
        }
        let k = predictions.len();
        let all_truth: Vec<usize> = truth
            .iter()
            .copied()
            .cycle()
            .take(truth.len() * k)
            .collect();
        let ours: Vec<usize> = predictions.concat();
        let theirs: Vec<usize> = other_report.test_predictions().concat();
        let outcomes = PairedOutcomes::new(&all_truth, &ours, &theirs)?;
        let p = paired_permutation_test(&outcomes, statistic, a.permutations, a.seed)?;
        metrics.p_value = Some(p);
        compare_line = Some(format!(
            "p-value\t{p:.4}\t({} permutations vs {})\n",
            a.permutations,
            other_path.display()
        ));
    }

    let mut text = format!(
        "{} ({} {}, seeds {:?}) on {} test slides\n",
        path.display(),
        report.train.method,
        report.model.head,
        report.seeds,
        truth.len()
    );
    text.push_str(&notes);
    text.push_str(&metric_lines(&metrics));
    if let Some(line) = compare_line {
        text.push_str(&line);
    }
    let _ = writeln!(
        text,
        "reproduced\t{}",
        if reproduced { "yes" } else { "no" }
    );
    text.push_str(&metrics.per_class_table());
    Ok(EvalOutput {
        metrics,
        reproduced: Some(reproduced),
        text,
    })
}

/// Attention of one slide laid out on its patch grid, with its labels.
#[derive(Clone, Debug)]
pub struct HeatmapArtifact {
    pub slide_id: String,
    pub map: Heatmap,
    /// `(coordinate, normalized weight)` per patch, in bag order.
    pub weights: PatchWeights,
    pub predicted: SlideClass,
    pub truth: Option<SlideClass>,
    pub consensus: Option<ConsensusLevel>,
}

impl HeatmapArtifact {
    pub fn table(&self) -> String {
        let mut out = format!(
            "# slide\t{}\n# predicted\t{}\n",
            self.slide_id, self.predicted
        );
        if let Some(t) = self.truth {
            let _ = writeln!(out, "# true\t{t}");
        }
        if let Some(c) = self.consensus {
            let _ = writeln!(out, "# consensus\t{c}");
        }
        out.push_str(&attention_table(&self.weights));
        out
    }
}

pub fn attention_artifact(
    model: &MilModel,
    bag_path: &Path,
    data: Option<&Path>,
) -> Result<HeatmapArtifact, CliError> {
    let bag = read_bag(bag_path)?;
    let output = model.forward(&bag)?;
    let weights = extract_attention(&output, &bag)?;
    let values: Vec<f64> = weights.iter().map(|w| w.1).collect();
    let map = Heatmap::new(&bag.coords, &values)?;
    let (mut truth, mut consensus) = (None, None);
    if let Some(data) = data {
        let dataset = load_dataset(data, true)?;
        match dataset
            .manifest
            .entries
            .iter()
            .find(|e| e.slide_id == bag.slide_id)
        {
            Some(entry) => {
                truth = Some(entry.label());
                consensus = entry
                    .nonexpert_score
                    .map(|ne| consensus_level(entry.expert_score, ne));
            }
            None => log::warn!(
                "slide {} not found in {}",
                bag.slide_id,
                dataset.path.display()
            ),
        }
    }
    Ok(HeatmapArtifact {
        slide_id: bag.slide_id,
        map,
        weights,
        predicted: output.predicted_class(),
        truth,
        consensus,
    })
}

pub(super) fn run_attn_map(a: &AttnArgs) -> Result<String, CliError> {
    let model = MilModel::load(&a.params)?;
    let artifact = attention_artifact(&model, &a.bag, a.data.as_deref())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tsv = with_extension(&a.out, "tsv");
    let pgm = with_extension(&a.out, "pgm");
    fs::write(&tsv, artifact.table()).map_err(|e| CliError::io(&tsv, e))?;
    fs::write(&pgm, artifact.map.to_pgm()).map_err(|e| CliError::io(&pgm, e))?;
    let mut out = format!("{}: predicted {}", artifact.slide_id, artifact.predicted);
    if let Some(t) = artifact.truth {
        let _ = write!(out, ", true {t}");
    }
    if let Some(c) = artifact.consensus {
        let _ = write!(out, ", consensus {c}");
    }
    let _ = writeln!(
        out,
        "\nwrote {} and {} ({}x{})",
        tsv.display(),
        pgm.display(),
        artifact.map.width,
        artifact.map.height
    );
    Ok(out)
}
