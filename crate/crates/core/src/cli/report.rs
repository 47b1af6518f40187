//! The `report.toml` document written by `wsd train` and read by `wsd eval`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::metrics::{MetricIntervals, MetricReport};
use crate::models::{ModelConfig, N_CLASSES};
use crate::training::TrainConfig;

pub const REPORT_FILE: &str = "report.toml";
pub const SCHEMA_VERSION: u32 = 1;

/// Per-class recall; absent classes are omitted from the table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benign: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gleason3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gleason4: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gleason5: Option<f64>,
}

impl From<[Option<f64>; N_CLASSES]> for PerClass {
    fn from(v: [Option<f64>; N_CLASSES]) -> Self {
        Self {
            benign: v[0],
            gleason3: v[1],
            gleason4: v[2],
            gleason5: v[3],
        }
    }
}

impl From<PerClass> for [Option<f64>; N_CLASSES] {
    fn from(p: PerClass) -> Self {
        [p.benign, p.gleason3, p.gleason4, p.gleason5]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

/// TOML-friendly mirror of [`MetricReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,
    /// Offsets from the point estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy_ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_f1_ci: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub per_class_accuracy: PerClass,
}

impl From<&MetricReport> for Metrics {
    fn from(r: &MetricReport) -> Self {
        let pair = |(low, high): (f64, f64)| Interval { low, high };
        Self {
            balanced_accuracy: r.balanced_accuracy,
            weighted_f1: r.weighted_f1,
            n: r.n,
            ci_level: r.ci.map(|c| c.level),
            balanced_accuracy_ci: r.ci.map(|c| pair(c.balanced_accuracy)),
            weighted_f1_ci: r.ci.map(|c| pair(c.weighted_f1)),
            p_value: r.p_value,
            per_class_accuracy: r.per_class_accuracy.into(),
        }
    }
}

impl From<&Metrics> for MetricReport {
    fn from(m: &Metrics) -> Self {
        let ci = match (m.ci_level, m.balanced_accuracy_ci, m.weighted_f1_ci) {
            (Some(level), Some(ba), Some(f1)) => Some(MetricIntervals {
                level,
                balanced_accuracy: (ba.low, ba.high),
                weighted_f1: (f1.low, f1.high),
            }),
            _ => None,
        };
        MetricReport {
            balanced_accuracy: m.balanced_accuracy,
            weighted_f1: m.weighted_f1,
            per_class_accuracy: m.per_class_accuracy.into(),
            n: m.n,
            ci,
            p_value: m.p_value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_balanced_accuracy: f64,
    /// Checkpoint and history files, relative to the report's directory.
    pub params_file: String,
    pub history_file: String,
    pub test: Metrics,
    pub test_predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
    pub manifest: PathBuf,
    /// SHA-256 of the manifest bytes, lowercase hex.
    pub manifest_sha256: String,
    pub seeds: Vec<u64>,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub test_slides: Vec<String>,
    pub test_labels: Vec<usize>,
    pub summary: Metrics,
    pub runs: Vec<SeedRun>,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Report {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let report: RunReport = toml::from_str(&text).map_err(|e| CliError::Report {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(CliError::Report {
                path: path.to_path_buf(),
                message: format!("unsupported schema version {}", report.schema_version),
            });
        }
        Ok(report)
    }

    pub fn test_predictions(&self) -> Vec<Vec<usize>> {
        self.runs
            .iter()
            .map(|r| r.test_predictions.clone())
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Resolves a report argument that may name either the file or its run directory.
pub fn report_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(REPORT_FILE)
    } else {
        arg.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::HeadKind;

    fn sample_report() -> RunReport {
        let truth = [0, 1, 2, 3, 3];
        let pred = vec![0, 1, 2, 2, 3];
        let mut metric =
            crate::metrics::seed_mean_report(&truth, std::slice::from_ref(&pred), 50, 0.95, 1).unwrap();
        metric.per_class_accuracy[1] = None;
        let m = Metrics::from(&metric);
        RunReport {
            schema_version: SCHEMA_VERSION,
            created_unix: 1,
            manifest: "data/manifest.tsv".into(),
            manifest_sha256: sha256_hex(b"x"),
            seeds: vec![13],
            bootstrap_resamples: 50,
            bootstrap_seed: 0,
            train: TrainConfig::default(),
            model: ModelConfig::new(HeadKind::Abmil, 4),
            test_slides: (0..5).map(|i| format!("s{i}")).collect(),
            test_labels: truth.to_vec(),
            summary: m.clone(),
            runs: vec![SeedRun {
                seed: 13,
                best_epoch: 2,
                val_balanced_accuracy: 0.5,
                params_file: "seed-13.params.json".into(),
                history_file: "seed-13.history.jsonl".into(),
                test: m,
                test_predictions: pred,
            }],
        }
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(REPORT_FILE);
        let report = sample_report();
        report.write(&path).unwrap();
        assert_eq!(RunReport::read(&path).unwrap(), report);
        assert_eq!(report_path(dir.path()), path);
    }

    #[test]
    fn metric_conversion_round_trips() {
        let r = sample_report();
        let back = MetricReport::from(&r.summary);
        assert_eq!(Metrics::from(&back), r.summary);
        assert_eq!(back.per_class_accuracy[1], None);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
