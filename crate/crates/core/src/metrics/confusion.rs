use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::models::N_CLASSES;

/// `counts[i][j]` = slides of true class `i` predicted as `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..N_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::Empty),
            t => Ok(self.correct() as f64 / t as f64),
        }
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut m = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= N_CLASSES || p >= N_CLASSES {
            return Err(MetricsError::LabelOutOfRange(t.max(p)));
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// Recall per class; `None` for classes without support.
pub fn per_class_accuracy(m: &ConfusionMatrix) -> [Option<f64>; N_CLASSES] {
    std::array::from_fn(|i| match m.support(i) {
        0 => None,
        s => Some(m.counts[i][i] as f64 / s as f64),
    })
}

/// Mean recall over classes with non-zero support.
pub fn balanced_accuracy(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let recalls: Vec<f64> = per_class_accuracy(m).into_iter().flatten().collect();
    if recalls.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Support-weighted mean of per-class F1 (F1 taken as 0 when P + R = 0).
pub fn weighted_f1(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut acc = 0.0;
    for i in 0..N_CLASSES {
        let support = m.support(i);
        if support == 0 {
            continue;
        }
        let tp = m.counts[i][i] as f64;
        let predicted = m.predicted(i) as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        acc += support as f64 * f1;
    }
    Ok(acc / total as f64)
}
