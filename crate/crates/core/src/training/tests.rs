use super::*;
use crate::bags::synth::EvidenceCurve;
use crate::diff::{grad_check_with, Stencil};
use crate::gleason::{ConsensusLevel, GleasonScore};
use crate::models::HeadKind;

fn logits_output(tape: &mut Tape, logits: &[f64], wsd: Option<f64>) -> GraphOutput {
    let l = tape.leaf(Tensor::row(logits.to_vec()));
    let w = wsd.map(|v| tape.leaf(Tensor::full(&[1, 1], v)));
    GraphOutput {
        logits: l,
        wsd: w,
        embedding: l,
        attention: vec![],
    }
}

fn log_sum_exp_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[test]
fn uniform_logits_give_ln4() {
    let mut tape = Tape::new();
    let out = logits_output(&mut tape, &[0.3; 4], None);
    let loss = loss_baseline(&mut tape, &out, SlideClass::Gleason4).unwrap();
    assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn dominant_logit_drives_loss_to_zero() {
    let mut tape = Tape::new();
    let out = logits_output(&mut tape, &[0.0, 60.0, 0.0, 0.0], None);
    let loss = loss_baseline(&mut tape, &out, SlideClass::Gleason3).unwrap();
    assert!(tape.value(loss).item() < 1e-20);
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let logits = [1.7, -0.4, 2.9, 0.05];
    for label in 0..4 {
        let mut tape = Tape::new();
        let out = logits_output(&mut tape, &logits, None);
        let loss = loss_baseline(&mut tape, &out, SlideClass::from_index(label).unwrap()).unwrap();
        assert!((tape.value(loss).item() - log_sum_exp_ce(&logits, label)).abs() < 1e-12);
    }
}

#[test]
fn multitask_combines_terms() {
    let logits = [0.2, 0.9, -1.0, 0.4];
    let ce = log_sum_exp_ce(&logits, 2);
    let (pred, target) = (0.8, 0.5);
    let mut tape = Tape::new();
    let out = logits_output(&mut tape, &logits, Some(pred));
    let loss = loss_multitask(&mut tape, &out, SlideClass::Gleason4, target, 1.0, 10.0).unwrap();
    let expect = ce + 10.0 * (pred - target) * (pred - target);
    assert!((tape.value(loss).item() - expect).abs() < 1e-12);

    let mut tape = Tape::new();
    let out = logits_output(&mut tape, &logits, Some(pred));
    let loss = loss_multitask(&mut tape, &out, SlideClass::Gleason4, target, 0.0, 2.0).unwrap();
    assert!((tape.value(loss).item() - 2.0 * 0.09).abs() < 1e-12);
}

#[test]
fn multitask_beta_zero_is_baseline_bits() {
    let logits = [0.123, -2.5, 0.77, 1.01];
    let mut tape = Tape::new();
    let out = logits_output(&mut tape, &logits, Some(0.3));
    let mt = loss_multitask(&mut tape, &out, SlideClass::Gleason5, 1.0, 1.0, 0.0).unwrap();
    let base = loss_baseline(&mut tape, &out, SlideClass::Gleason5).unwrap();
    assert_eq!(
        tape.value(mt).item().to_bits(),
        tape.value(base).item().to_bits()
    );
}

#[test]
fn multitask_without_head_is_config_error() {
    let mut tape = Tape::new();
    let out = logits_output(&mut tape, &[0.0; 4], None);
    let err = loss_multitask(&mut tape, &out, SlideClass::Benign, 0.0, 1.0, 1.0).unwrap_err();
    assert!(matches!(err, TrainError::MissingRegressionHead));
}

#[test]
fn weighted_loss_scales_ce() {
    let logits = [0.5, 0.1, -0.3, 0.0];
    let ce = log_sum_exp_ce(&logits, 0);
    let triple = WeightTriple::new(4.0, 3.0, 1.0);
    for (level, w) in [
        (ConsensusLevel::NoConsensus, 4.0),
        (ConsensusLevel::Heterogeneous, 3.0),
        (ConsensusLevel::Homogeneous, 1.0),
    ] {
        let mut tape = Tape::new();
        let out = logits_output(&mut tape, &logits, None);
        let loss =
            loss_weighted(&mut tape, &out, SlideClass::Benign, triple.weight(level)).unwrap();
        assert!((tape.value(loss).item() - w * ce).abs() < 1e-12);
    }
    let mut tape = Tape::new();
    let out = logits_output(&mut tape, &logits, None);
    let one = loss_weighted(&mut tape, &out, SlideClass::Benign, 1.0).unwrap();
    let base = loss_baseline(&mut tape, &out, SlideClass::Benign).unwrap();
    assert_eq!(
        tape.value(one).item().to_bits(),
        tape.value(base).item().to_bits()
    );
}

#[test]
fn epoch_orders_are_seeded_permutations() {
    let a = epoch_order(5, 0, 50);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(5, 0, 50));
    assert_ne!(a, epoch_order(5, 1, 50));
    assert_ne!(a, epoch_order(6, 0, 50));
}

fn separable_cohort(total: usize) -> [Vec<Sample>; 3] {
    let config = SynthConfig {
        evidence: EvidenceCurve {
            easy: 1.0,
            hard: 1.0,
        },
        noise: 0.05,
        size_factor: 0.05,
        feature_dim: 16,
        seed: 21,
        target_consensus: None,
        ..SynthConfig::default().with_total(total)
    };
    synthetic_splits(&config).unwrap()
}

fn small(head: HeadKind) -> ModelConfig {
    ModelConfig::new(head, 16).with_sizes(16, 8)
}

#[test]
fn separable_toy_is_learned() {
    let [train_set, val, _] = separable_cohort(120);
    let config = TrainConfig {
        epochs: 20,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let model = MilModel::init(small(HeadKind::Abmil)).unwrap();
    let out = train(&config, model, &train_set, &val).unwrap();
    assert!(
        out.best_record().val_balanced_accuracy >= 0.95,
        "{:?}",
        out.history
            .iter()
            .map(|r| r.val_balanced_accuracy)
            .collect::<Vec<_>>()
    );
}

fn trajectory(
    config: &TrainConfig,
    model: MilModel,
    train_set: &[Sample],
    val: &[Sample],
    shared: usize,
) -> Vec<Vec<Tensor>> {
    let mut states = Vec::new();
    train_with(config, model, train_set, val, |_, m| {
        states.push(m.params[..shared].to_vec())
    })
    .unwrap();
    states
}

#[test]
fn reductions_reproduce_baseline_trajectory() {
    let [train_set, val, _] = separable_cohort(60);
    let base_cfg = TrainConfig {
        epochs: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    for head in [HeadKind::Abmil, HeadKind::MaxMil] {
        let plain = small(head).with_seed(3);
        let shared = plain.layout().len();
        let base = trajectory(
            &base_cfg,
            MilModel::init(plain).unwrap(),
            &train_set,
            &val,
            shared,
        );

        let mt_cfg = TrainConfig {
            method: Method::MultiTask,
            alpha: 1.0,
            beta: 0.0,
            ..base_cfg.clone()
        };
        let with_head = MilModel::init(plain.with_regression(true)).unwrap();
        assert_eq!(
            trajectory(&mt_cfg, with_head, &train_set, &val, shared),
            base
        );

        let w_cfg = TrainConfig {
            method: Method::Weighted,
            weights: WeightTriple::UNIT,
            allow_weights_out_of_range: true,
            ..base_cfg.clone()
        };
        assert_eq!(
            trajectory(
                &w_cfg,
                MilModel::init(plain).unwrap(),
                &train_set,
                &val,
                shared
            ),
            base
        );
    }
}

#[test]
fn training_is_deterministic() {
    let [train_set, val, _] = separable_cohort(60);
    let config = TrainConfig {
        method: Method::Weighted,
        epochs: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let model = MilModel::init(small(HeadKind::GatedAbmil)).unwrap();
        let out = train(&config, model, &train_set, &val).unwrap();
        (out.history, out.best.params, out.best_epoch)
    };
    assert_eq!(run(), run());
}

fn random_bag(seed: u64, n: usize, d: usize) -> Sample {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let coords = (0..n as i32).map(|i| (i, 0)).collect();
    let bag = Bag::new("slide_rand", Tensor::matrix(n, d, data).unwrap(), coords).unwrap();
    let expert: GleasonScore = "4+3".parse().unwrap();
    let nonexpert: GleasonScore = "3+3".parse().unwrap();
    Sample {
        bag,
        label: SlideClass::Gleason4,
        record: Some(ConsensusRecord::new(
            "slide_rand",
            expert,
            nonexpert,
            &WsdScale::default(),
            &WeightTriple::UNIT,
        )),
    }
}

#[test]
fn loss_gradients_pass_grad_check() {
    for head in [
        HeadKind::MaxMil,
        HeadKind::Abmil,
        HeadKind::GatedAbmil,
        HeadKind::Dsmil,
    ] {
        for seed in 0..4 {
            let sample = random_bag(100 + seed, 5, 8);
            for (method, regression) in [
                (Method::Baseline, false),
                (Method::MultiTask, true),
                (Method::Weighted, false),
            ] {
                let config = TrainConfig {
                    method,
                    alpha: 1.0,
                    beta: 2.0,
                    ..TrainConfig::default()
                };
                let model_config = ModelConfig::new(head, 8)
                    .with_sizes(16, 8)
                    .with_regression(regression)
                    .with_seed(seed);
                let model = MilModel::init(model_config).unwrap();
                let report = grad_check_with(
                    |tape, vars| {
                        sample_loss(&config, &model, tape, vars, &sample).map_err(|e| match e {
                            TrainError::Diff(d) | TrainError::Model(ModelError::Diff(d)) => d,
                            other => panic!("{other}"),
                        })
                    },
                    &model.params,
                    1e-4,
                    1e-6,
                    Stencil::FivePoint,
                )
                .unwrap();
                assert!(
                    report.passed(),
                    "{head} seed {seed} {method}: {:.2e}",
                    report.worst()
                );
            }
        }
    }
}

#[test]
fn configuration_errors() {
    let [train_set, val, _] = separable_cohort(30);
    let model = MilModel::init(small(HeadKind::Abmil)).unwrap();
    let mt = TrainConfig {
        method: Method::MultiTask,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mt, model.clone(), &train_set, &val),
        Err(TrainError::MissingRegressionHead)
    ));
    let out_of_range = TrainConfig {
        method: Method::Weighted,
        weights: WeightTriple::new(1.0, 1.7, 2.0),
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&out_of_range, model.clone(), &train_set, &val),
        Err(TrainError::Weights(_))
    ));
    assert!(matches!(
        train(&TrainConfig::default(), model.clone(), &[], &val),
        Err(TrainError::EmptySplit("train"))
    ));

    let mut unlabelled = train_set.clone();
    unlabelled[0].record = None;
    let weighted = TrainConfig {
        method: Method::Weighted,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&weighted, model, &unlabelled, &val),
        Err(TrainError::MissingConsensus { .. })
    ));
}

#[test]
fn nan_loss_names_epoch_and_slide() {
    let [train_set, val, _] = separable_cohort(30);
    let mut model = MilModel::init(small(HeadKind::Abmil)).unwrap();
    let last = model.params.len() - 1;
    model.params[last].data_mut()[0] = f64::NAN;
    let err = train(&TrainConfig::default(), model, &train_set, &val).unwrap_err();
    match err {
        TrainError::NonFiniteLoss {
            epoch, slide_id, ..
        } => {
            assert_eq!(epoch, 1);
            assert!(slide_id.starts_with("slide_"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn singleton_grid_selects_its_point() {
    let [train_set, val, _] = separable_cohort(30);
    let base = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let points = [GridPoint::Weights(WeightTriple::new(4.0, 3.0, 1.0))];
    let table = grid_search(
        &points,
        &base,
        &small(HeadKind::Abmil),
        &[1, 2],
        &train_set,
        &val,
    )
    .unwrap();
    assert_eq!(table.best, 0);
    assert_eq!(table.rows[0].seed_balanced_accuracy.len(), 2);
    let mean = table.rows[0].seed_balanced_accuracy.iter().sum::<f64>() / 2.0;
    assert_eq!(table.rows[0].balanced_accuracy, mean);
    assert!(table.render().contains("(4,3,1)*"));
}

#[test]
fn grid_ties_go_to_first_point() {
    let row = |p: GridPoint, ba: f64| GridRow {
        point: p,
        seed_balanced_accuracy: vec![ba],
        seed_weighted_f1: vec![0.5],
        balanced_accuracy: ba,
        weighted_f1: 0.5,
    };
    let grid = default_alpha_beta_grid();
    let table = GridTable::from_rows(vec![
        row(grid[0], 0.7),
        row(grid[1], 0.8),
        row(grid[2], 0.8),
    ]);
    assert_eq!(table.best, 1);
    let text = table.render();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[1].starts_with("Bal. Acc."));
    assert!(lines[2].starts_with("W. F1-Score"));
}

#[test]
fn default_grids() {
    assert_eq!(default_alpha_beta_grid().len(), 6);
    assert_eq!(
        default_weight_grid()[1],
        GridPoint::Weights(WeightTriple::new(1.0, 1.7, 2.0))
    );
    assert_eq!(
        default_lr_grid(),
        vec![
            GridPoint::LearningRate(1e-3),
            GridPoint::LearningRate(3e-4),
            GridPoint::LearningRate(1e-4)
        ]
    );
}

#[test]
fn tuple_lists_parse() {
    assert_eq!(
        parse_tuples("(1,0);(1, 10)", 2).unwrap(),
        vec![vec![1.0, 0.0], vec![1.0, 10.0]]
    );
    assert!(parse_tuples("(1,0,3)", 2).is_err());
    assert!(parse_tuples("(a,b)", 2).is_err());
}

#[test]
fn method_names() {
    assert_eq!("multi-task".parse::<Method>().unwrap(), Method::MultiTask);
    assert!("focal".parse::<Method>().is_err());
    let score: GleasonScore = "4+3".parse().unwrap();
    assert_eq!(crate::gleason::class_of(score), SlideClass::Gleason4);
}
