//! Slide-level evaluation metrics and significance statistics.

mod confusion;
mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use confusion::{
    balanced_accuracy, confusion, per_class_accuracy, weighted_f1, ConfusionMatrix,
};
pub use stats::{
    bootstrap, format_with_ci, paired_permutation_test, BootstrapDistribution, PairedOutcomes,
    Statistic,
};

use crate::gleason::SlideClass;
use crate::models::N_CLASSES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {0} out of range 0..4")]
    LabelOutOfRange(usize),
    #[error("no samples to evaluate")]
    Empty,
    #[error("metric undefined on the full sample")]
    Undefined,
    #[error("{0}")]
    InvalidArgument(&'static str),
    #[error("unknown statistic {0:?}")]
    UnknownStatistic(String),
}

/// Bootstrap offsets `(low - point, high - point)` for the headline metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricIntervals {
    pub level: f64,
    pub balanced_accuracy: (f64, f64),
    pub weighted_f1: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_accuracy: [Option<f64>; N_CLASSES],
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<MetricIntervals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

impl MetricReport {
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self, MetricsError> {
        Ok(Self {
            balanced_accuracy: balanced_accuracy(m)?,
            weighted_f1: weighted_f1(m)?,
            per_class_accuracy: per_class_accuracy(m),
            n: m.total() as usize,
            ci: None,
            p_value: None,
        })
    }

    /// Whether the attached p-value is below 0.05.
    pub fn significant(&self) -> bool {
        self.p_value.is_some_and(|p| p < 0.05)
    }

    /// `75.6 (-1.4, +1.9) *` style cells for balanced accuracy and weighted F1.
    /// Without intervals only the point estimate is shown.
    pub fn display_cells(&self) -> (String, String) {
        let cell = |point: f64, offsets: Option<(f64, f64)>| match offsets {
            Some(o) => format_with_ci(point, o, self.significant()),
            None => {
                let star = if self.significant() { " *" } else { "" };
                format!("{:.1}{star}", 100.0 * point)
            }
        };
        (
            cell(self.balanced_accuracy, self.ci.map(|c| c.balanced_accuracy)),
            cell(self.weighted_f1, self.ci.map(|c| c.weighted_f1)),
        )
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self, MetricsError> {
        Self::from_confusion(&confusion(truth, predicted)?)
    }

    /// Four-row per-class table (Benign / Gleason 3 / 4 / 5), in percent.
    pub fn per_class_table(&self) -> String {
        let mut out = String::from("class\taccuracy\n");
        for (c, acc) in SlideClass::ALL.iter().zip(self.per_class_accuracy) {
            match acc {
                Some(a) => out.push_str(&format!("{}\t{:.1}\n", c.label(), 100.0 * a)),
                None => out.push_str(&format!("{}\t-\n", c.label())),
            }
        }
        out
    }
}

fn subset(values: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| values[i]).collect()
}

/// Metrics averaged over several prediction sets of the same slides (one per
/// seed), with percentile-bootstrap offsets of the averaged metrics.
pub fn seed_mean_report(
    truth: &[usize],
    predictions: &[Vec<usize>],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<MetricReport, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let reports = predictions
        .iter()
        .map(|p| MetricReport::from_predictions(truth, p))
        .collect::<Result<Vec<_>, _>>()?;
    let k = reports.len() as f64;
    let per_class = std::array::from_fn(|c| {
        reports
            .iter()
            .map(|r| r.per_class_accuracy[c])
            .sum::<Option<f64>>()
            .map(|s| s / k)
    });

    let averaged = |idx: &[usize], metric: fn(&ConfusionMatrix) -> Result<f64, MetricsError>| {
        let t = subset(truth, idx);
        let mut total = 0.0;
        for p in predictions {
            total += metric(&confusion(&t, &subset(p, idx)).ok()?).ok()?;
        }
        Some(total / k)
    };
    let ci = if n_resamples > 0 {
        let ba = bootstrap(
            truth.len(),
            |idx| averaged(idx, balanced_accuracy),
            n_resamples,
            seed,
        )?;
        let f1 = bootstrap(
            truth.len(),
            |idx| averaged(idx, weighted_f1),
            n_resamples,
            seed,
        )?;
        Some(MetricIntervals {
            level,
            balanced_accuracy: ba.offsets(level),
            weighted_f1: f1.offsets(level),
        })
    } else {
        None
    };
    Ok(MetricReport {
        balanced_accuracy: reports.iter().map(|r| r.balanced_accuracy).sum::<f64>() / k,
        weighted_f1: reports.iter().map(|r| r.weighted_f1).sum::<f64>() / k,
        per_class_accuracy: per_class,
        n: truth.len(),
        ci,
        p_value: None,
    })
}
