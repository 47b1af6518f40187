//! The `wsd` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O
//! error, 4 numeric failure during training.

mod commands;
pub mod heatmap;
pub mod report;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bags::BagError;
use crate::gleason::GleasonError;
use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::training::TrainError;

pub use commands::{
    attention_artifact, consensus_table, evaluate_run, run_eval, run_gen_synthetic, run_grid,
    run_train, EvalOutput, HeatmapArtifact,
};
pub use heatmap::{attention_table, Heatmap, HeatmapError};
pub use report::{RunReport, SeedRun, REPORT_FILE, SCHEMA_VERSION};

/// Environment variable naming the default dataset directory.
pub const DATA_ROOT_ENV: &str = "WSD_DATA_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Report { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{} slide(s) lack a non-expert score: {}", .0.len(), .0.join(", "))]
    MissingNonExpert(Vec<String>),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Bags(#[from] BagError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Gleason(#[from] GleasonError),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Gleason(_) => 2,
            CliError::Bags(BagError::Config(_)) => 2,
            CliError::Model(e) => model_code(e),
            CliError::Train(e) => train_code(e),
            CliError::Metrics(
                MetricsError::InvalidArgument(_) | MetricsError::UnknownStatistic(_),
            ) => 2,
            _ => 3,
        }
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) | ModelError::UnknownHead(_) => 2,
        ModelError::Diff(_) => 4,
        _ => 3,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) | TrainError::MissingRegressionHead | TrainError::Weights(_) => 2,
        TrainError::NonFiniteLoss { .. }
        | TrainError::NonFiniteGradient { .. }
        | TrainError::OptimizerShape { .. }
        | TrainError::Diff(_) => 4,
        TrainError::AtSlide { source, .. } | TrainError::GridPoint { source, .. } => {
            train_code(source)
        }
        TrainError::Model(m) => model_code(m),
        TrainError::Data(BagError::Config(_)) => 2,
        _ => 3,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wsd",
    version,
    about = "Disagreement-aware MIL training for Gleason grading"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (manifest plus bag files).
    GenSynthetic(GenArgs),
    /// Consensus level percentages, overall and per expert class.
    ConsensusStats(DataArgs),
    /// Train one model per seed and write a run report.
    Train(TrainArgs),
    /// Grid search over loss or optimizer hyperparameters.
    Grid(GridArgs),
    /// Re-evaluate a run on its test split, optionally against another run.
    Eval(EvalArgs),
    /// Export one slide's attention as a TSV table and a P5 graymap.
    AttnMap(AttnArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total slides, split 4:1:1 into train/val/test.
    #[arg(long, default_value_t = 900, value_parser = clap::value_parser!(u64).range(1..))]
    pub slides: u64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Scales the per-slide instance-count range.
    #[arg(long, default_value_t = 0.1)]
    pub size_factor: f64,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Dataset directory holding manifest.tsv, or the manifest file itself.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "abmil")]
    pub model: String,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub attention_dim: usize,
}

#[derive(Debug, Args, Clone)]
pub struct LossArgs {
    #[arg(long, default_value = "baseline")]
    pub method: String,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    /// Loss weights `w_nc,w_hec,w_hoc`.
    #[arg(long, default_value = "4,3,1")]
    pub weights: String,
    #[arg(long)]
    pub allow_weights_out_of_range: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "13,37")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Bootstrap resamples for the test-metric intervals (0 disables them).
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    /// Run directory for the report, checkpoints and histories.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    /// `(alpha,beta)` points; the flag alone selects the default grid.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub grid_ab: Option<String>,
    /// `(w_nc,w_hec,w_hoc)` points; the flag alone selects the default grid.
    #[arg(long = "grid-w", num_args = 0..=1, default_missing_value = "")]
    pub grid_w: Option<String>,
    /// Learning rates separated by `;`; the flag alone selects the default grid.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub grid_lr: Option<String>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run report (or its directory) written by `train`.
    #[arg(long, conflicts_with = "params", required_unless_present = "params")]
    pub report: Option<PathBuf>,
    /// A single checkpoint to evaluate instead of a run.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Dataset; defaults to the manifest recorded in the report.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: Option<PathBuf>,
    /// Second run report to test against with a paired permutation test.
    #[arg(long, requires = "report")]
    pub compare: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub permutations: usize,
    #[arg(long, default_value = "balanced-accuracy")]
    pub statistic: String,
    /// Seed of the permutation test.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bootstrap resamples for a single checkpoint (reports reuse their own).
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub bag: PathBuf,
    /// Output prefix; `.tsv` and `.pgm` are appended.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset used to look up the slide's labels.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynthetic(a) => run_gen_synthetic(&a).map(|text| print!("{text}")),
        Command::ConsensusStats(a) => {
            commands::run_consensus_stats(&a).map(|text| print!("{text}"))
        }
        Command::Train(a) => run_train(&a).map(|(_, text)| print!("{text}")),
        Command::Grid(a) => run_grid(&a).map(|text| print!("{text}")),
        Command::Eval(a) => run_eval(&a).map(|text| print!("{text}")),
        Command::AttnMap(a) => commands::run_attn_map(&a).map(|text| print!("{text}")),
    }
}

/// Parses the process arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let nan = TrainError::NonFiniteLoss {
            epoch: 1,
            slide_id: "s".into(),
            value: f64::NAN,
        };
        let nested = TrainError::GridPoint {
            index: 0,
            label: "(1,0)".into(),
            source: Box::new(TrainError::AtSlide {
                epoch: 1,
                slide_id: "s".into(),
                source: Box::new(nan),
            }),
        };
        assert_eq!(CliError::from(nested).exit_code(), 4);
        assert_eq!(
            CliError::from(TrainError::MissingRegressionHead).exit_code(),
            2
        );
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(TrainError::EmptySplit("val")).exit_code(), 3);
        assert_eq!(CliError::MissingNonExpert(vec!["a".into()]).exit_code(), 3);
        assert_eq!(
            CliError::from(ModelError::DimensionMismatch {
                expected: 2,
                found: 3
            })
            .exit_code(),
            3
        );
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
