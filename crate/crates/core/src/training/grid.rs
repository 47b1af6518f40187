use std::fmt;

use serde::{Deserialize, Serialize};

use super::{train_seeds, Method, Sample, TrainConfig, TrainError};
use crate::gleason::WeightTriple;
use crate::models::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridPoint {
    AlphaBeta { alpha: f64, beta: f64 },
    Weights(WeightTriple),
    LearningRate(f64),
}

impl GridPoint {
    /// The configuration trained at this point. Weight points skip the
    /// recommended-range check.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        match *self {
            GridPoint::AlphaBeta { alpha, beta } => TrainConfig {
                method: Method::MultiTask,
                alpha,
                beta,
                ..base.clone()
            },
            GridPoint::Weights(weights) => TrainConfig {
                method: Method::Weighted,
                weights,
                allow_weights_out_of_range: true,
                ..base.clone()
            },
            GridPoint::LearningRate(learning_rate) => TrainConfig {
                learning_rate,
                ..base.clone()
            },
        }
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridPoint::AlphaBeta { alpha, beta } => write!(f, "({alpha},{beta})"),
            GridPoint::Weights(w) => write!(f, "{w}"),
            GridPoint::LearningRate(lr) => write!(f, "lr={lr}"),
        }
    }
}

pub fn default_alpha_beta_grid() -> Vec<GridPoint> {
    [
        (1.0, 0.0),
        (1.0, 1.0),
        (1.0, 2.0),
        (1.0, 3.0),
        (1.0, 10.0),
        (1.0, 50.0),
    ]
    .into_iter()
    .map(|(alpha, beta)| GridPoint::AlphaBeta { alpha, beta })
    .collect()
}

pub fn default_weight_grid() -> Vec<GridPoint> {
    [
        (1.0, 1.0, 1.0),
        (1.0, 1.7, 2.0),
        (2.0, 1.3, 1.0),
        (4.0, 2.0, 1.0),
        (4.0, 3.0, 1.0),
        (4.0, 4.0, 1.0),
    ]
    .into_iter()
    .map(|(nc, hec, hoc)| GridPoint::Weights(WeightTriple::new(nc, hec, hoc)))
    .collect()
}

pub fn default_lr_grid() -> Vec<GridPoint> {
    [1e-3, 3e-4, 1e-4]
        .into_iter()
        .map(GridPoint::LearningRate)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    /// Best-epoch validation metrics of each seed.
    pub seed_balanced_accuracy: Vec<f64>,
    pub seed_weighted_f1: Vec<f64>,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
    pub best: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl GridTable {
    pub fn from_rows(rows: Vec<GridRow>) -> Self {
        let mut best = 0;
        for (i, row) in rows.iter().enumerate() {
            if row.balanced_accuracy > rows[best].balanced_accuracy {
                best = i;
            }
        }
        Self { rows, best }
    }

    pub fn best_point(&self) -> GridPoint {
        self.rows[self.best].point
    }

    /// Tab-separated table with one column per grid point; the selected
    /// column header carries a `*`.
    pub fn render(&self) -> String {
        let mut header = String::from("metric");
        let mut bal = String::from("Bal. Acc.");
        let mut f1 = String::from("W. F1-Score");
        for (i, row) in self.rows.iter().enumerate() {
            let mark = if i == self.best { "*" } else { "" };
            header.push_str(&format!("\t{}{mark}", row.point));
            bal.push_str(&format!("\t{:.1}", 100.0 * row.balanced_accuracy));
            f1.push_str(&format!("\t{:.1}", 100.0 * row.weighted_f1));
        }
        format!("{header}\n{bal}\n{f1}\n")
    }
}

/// Trains every grid point once per seed and selects the point with the
/// highest seed-mean validation balanced accuracy (ties go to the earlier
/// point).
pub fn grid_search(
    points: &[GridPoint],
    base: &TrainConfig,
    model_config: &ModelConfig,
    seeds: &[u64],
    train: &[Sample],
    val: &[Sample],
) -> Result<GridTable, TrainError> {
    if points.is_empty() {
        return Err(TrainError::Config("grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(points.len());
    for (index, point) in points.iter().enumerate() {
        let config = point.apply(base);
        let model = model_config.with_regression(config.method == Method::MultiTask);
        log::info!("grid point {index} {point}");
        let runs =
            train_seeds(&config, &model, seeds, train, val).map_err(|e| TrainError::GridPoint {
                index,
                label: point.to_string(),
                source: Box::new(e),
            })?;
        let seed_balanced_accuracy: Vec<f64> = runs
            .iter()
            .map(|r| r.best_record().val_balanced_accuracy)
            .collect();
        let seed_weighted_f1: Vec<f64> = runs
            .iter()
            .map(|r| r.best_record().val_weighted_f1)
            .collect();
        rows.push(GridRow {
            point: *point,
            balanced_accuracy: mean(&seed_balanced_accuracy),
            weighted_f1: mean(&seed_weighted_f1),
            seed_balanced_accuracy,
            seed_weighted_f1,
        });
    }
    Ok(GridTable::from_rows(rows))
}

/// Parses `"(1,0);(1,10)"` style lists of numeric tuples of length `arity`.
pub fn parse_tuples(text: &str, arity: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let bad = |item: &str| {
        TrainError::Config(format!(
            "bad grid entry {item:?}: expected {arity} comma-separated numbers"
        ))
    };
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let inner = item.trim_start_matches('(').trim_end_matches(')');
            let values: Vec<f64> = inner
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad(item)))
                .collect::<Result<_, _>>()?;
            if values.len() == arity {
                Ok(values)
            } else {
                Err(bad(item))
            }
        })
        .collect()
}
