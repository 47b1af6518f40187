//! Training objectives, optimizer, epoch loop and grid search.

mod adam;
mod grid;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use grid::{
    default_alpha_beta_grid, default_lr_grid, default_weight_grid, grid_search, parse_tuples,
    GridPoint, GridRow, GridTable,
};

use crate::bags::synth::generate_in_memory;
use crate::bags::{read_bag, Bag, BagError, Manifest, Split, SynthConfig};
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::gleason::{ConsensusRecord, GleasonError, SlideClass, WeightTriple, WsdScale};
use crate::metrics::{MetricReport, MetricsError};
use crate::models::{GraphOutput, MilModel, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("slide {slide_id} has no consensus record (non-expert score required)")]
    MissingConsensus { slide_id: String },
    #[error("multi-task loss needs a model with a regression head")]
    MissingRegressionHead,
    #[error("non-finite loss {value} at epoch {epoch}, slide {slide_id}")]
    NonFiniteLoss {
        epoch: usize,
        slide_id: String,
        value: f64,
    },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("optimizer state does not match parameter {index}")]
    OptimizerShape { index: usize },
    #[error("epoch {epoch}, slide {slide_id}: {source}")]
    AtSlide {
        epoch: usize,
        slide_id: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("grid point {index} {label}: {source}")]
    GridPoint {
        index: usize,
        label: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Weights(#[from] GleasonError),
    #[error(transparent)]
    Data(#[from] BagError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    MultiTask,
    Weighted,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::MultiTask => "multitask",
            Method::Weighted => "weighted",
        }
    }

    pub fn needs_consensus(self) -> bool {
        self != Method::Baseline
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "ce" => Ok(Method::Baseline),
            "multitask" | "multi-task" | "mt" => Ok(Method::MultiTask),
            "weighted" | "weighted-loss" => Ok(Method::Weighted),
            other => Err(TrainError::Config(format!(
                "unknown method {other:?} (expected baseline, multitask or weighted)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub weights: WeightTriple,
    pub allow_weights_out_of_range: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Baseline,
            alpha: 1.0,
            beta: 10.0,
            weights: WeightTriple::new(4.0, 3.0, 1.0),
            allow_weights_out_of_range: false,
            learning_rate: 1e-3,
            epochs: 30,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        if !(self.alpha.is_finite()
            && self.alpha >= 0.0
            && self.beta.is_finite()
            && self.beta >= 0.0)
        {
            return Err(TrainError::Config(format!(
                "alpha and beta must be finite and >= 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate must be > 0 (got {})",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        match self.method {
            Method::MultiTask if !model.with_regression_head => {
                Err(TrainError::MissingRegressionHead)
            }
            Method::Weighted => Ok(self.weights.validate(self.allow_weights_out_of_range)?),
            _ => Ok(()),
        }
    }
}

/// One labelled bag, plus its consensus record when a non-expert score exists.
#[derive(Clone, Debug)]
pub struct Sample {
    pub bag: Bag,
    pub label: SlideClass,
    pub record: Option<ConsensusRecord>,
}

/// Loads every bag of `split` in slide-id order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Sample>, BagError> {
    let mut entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .collect();
    entries.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let scale = WsdScale::default();
    entries
        .into_iter()
        .map(|e| {
            let mut bag = read_bag(manifest.bag_file(e))?;
            bag.slide_id = e.slide_id.clone();
            Ok(Sample {
                bag,
                label: e.label(),
                record: e.consensus(&scale, &WeightTriple::UNIT),
            })
        })
        .collect()
}

/// Train, validation and test samples of a synthetic cohort, generated in
/// memory without touching disk.
pub fn synthetic_splits(config: &SynthConfig) -> Result<[Vec<Sample>; 3], BagError> {
    let scale = WsdScale::default();
    let mut splits: [Vec<Sample>; 3] = Default::default();
    for (meta, bag) in generate_in_memory(config)? {
        let record = ConsensusRecord::new(
            bag.slide_id.clone(),
            meta.expert,
            meta.nonexpert,
            &scale,
            &WeightTriple::UNIT,
        );
        let slot = match config.split_of(meta.index) {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        splits[slot].push(Sample {
            bag,
            label: meta.class,
            record: Some(record),
        });
    }
    Ok(splits)
}

/// Cross-entropy of the class logits.
pub fn loss_baseline(
    tape: &mut Tape,
    out: &GraphOutput,
    label: SlideClass,
) -> Result<Var, TrainError> {
    Ok(tape.cross_entropy(out.logits, label.index())?)
}

/// `alpha * CE + beta * (wsd_prediction - wsd_target)^2`.
pub fn loss_multitask(
    tape: &mut Tape,
    out: &GraphOutput,
    label: SlideClass,
    wsd_target: f64,
    alpha: f64,
    beta: f64,
) -> Result<Var, TrainError> {
    let wsd = out.wsd.ok_or(TrainError::MissingRegressionHead)?;
    let ce = tape.cross_entropy(out.logits, label.index())?;
    let se = tape.squared_error(wsd, &Tensor::full(&[1, 1], wsd_target))?;
    let ce = tape.scale(ce, alpha);
    let se = tape.scale(se, beta);
    Ok(tape.add(ce, se)?)
}

/// `weight * CE`.
pub fn loss_weighted(
    tape: &mut Tape,
    out: &GraphOutput,
    label: SlideClass,
    weight: f64,
) -> Result<Var, TrainError> {
    let ce = tape.cross_entropy(out.logits, label.index())?;
    Ok(tape.scale(ce, weight))
}

fn record_of(sample: &Sample) -> Result<&ConsensusRecord, TrainError> {
    sample
        .record
        .as_ref()
        .ok_or_else(|| TrainError::MissingConsensus {
            slide_id: sample.bag.slide_id.clone(),
        })
}

/// Records the configured objective for one bag on `tape`.
pub fn sample_loss(
    config: &TrainConfig,
    model: &MilModel,
    tape: &mut Tape,
    params: &[Var],
    sample: &Sample,
) -> Result<Var, TrainError> {
    let out = model.forward_on(tape, params, &sample.bag)?;
    match config.method {
        Method::Baseline => loss_baseline(tape, &out, sample.label),
        Method::MultiTask => {
            let target = record_of(sample)?.wsd;
            loss_multitask(tape, &out, sample.label, target, config.alpha, config.beta)
        }
        Method::Weighted => {
            let weight = config.weights.weight(record_of(sample)?.level);
            loss_weighted(tape, &out, sample.label, weight)
        }
    }
}

/// Visiting order of the training slides in `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn predict_all(model: &MilModel, samples: &[Sample]) -> Result<Vec<usize>, TrainError> {
    samples
        .iter()
        .map(|s| Ok(model.predict(&s.bag)?.index()))
        .collect()
}

pub fn evaluate(
    model: &MilModel,
    samples: &[Sample],
) -> Result<(Vec<usize>, MetricReport), TrainError> {
    let predicted = predict_all(model, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    let report = MetricReport::from_predictions(&truth, &predicted)?;
    Ok((predicted, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
    pub val_weighted_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation balanced accuracy.
    pub best: MilModel,
    /// 1-based.
    pub best_epoch: usize,
    pub last: MilModel,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

pub fn train(
    config: &TrainConfig,
    model: MilModel,
    train: &[Sample],
    val: &[Sample],
) -> Result<TrainOutcome, TrainError> {
    train_with(config, model, train, val, |_, _| {})
}

/// Like [`train`], calling `on_epoch` after each epoch with its record and
/// the current parameters.
pub fn train_with(
    config: &TrainConfig,
    mut model: MilModel,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord, &MilModel),
) -> Result<TrainOutcome, TrainError> {
    config.validate(&model.config)?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    if config.method.needs_consensus() {
        for s in train {
            record_of(s)?;
        }
    }

    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, MilModel)> = None;

    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for &i in &epoch_order(config.seed, epoch, train.len()) {
            let sample = &train[i];
            let at = |e: TrainError| TrainError::AtSlide {
                epoch: epoch + 1,
                slide_id: sample.bag.slide_id.clone(),
                source: Box::new(e),
            };
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let loss = sample_loss(config, &model, &mut tape, &vars, sample).map_err(at)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    slide_id: sample.bag.slide_id.clone(),
                    value,
                });
            }
            total += value;
            let grads = tape.backward(loss).map_err(|e| at(e.into()))?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            opt.update(&mut model.params, &grads).map_err(at)?;
        }

        let (_, report) = evaluate(&model, val)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / train.len() as f64,
            val_balanced_accuracy: report.balanced_accuracy,
            val_weighted_f1: report.weighted_f1,
        };
        log::debug!(
            "epoch {} loss {:.4} val bal-acc {:.4}",
            record.epoch,
            record.train_loss,
            record.val_balanced_accuracy
        );
        on_epoch(&record, &model);
        if best
            .as_ref()
            .is_none_or(|(_, score, _)| record.val_balanced_accuracy > *score)
        {
            best = Some((record.epoch, record.val_balanced_accuracy, model.clone()));
        }
        history.push(record);
    }

    let (best_epoch, _, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

/// Trains one run per seed; each seed drives both the parameter
/// initialization and the epoch shuffles.
pub fn train_seeds(
    config: &TrainConfig,
    model_config: &ModelConfig,
    seeds: &[u64],
    train_set: &[Sample],
    val: &[Sample],
) -> Result<Vec<TrainOutcome>, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let model = MilModel::init(model_config.with_seed(seed))?;
            let run = TrainConfig {
                seed,
                ..config.clone()
            };
            train(&run, model, train_set, val)
        })
        .collect()
}

#[cfg(test)]
mod tests;
