//! Experiment configuration, the train/select/evaluate pipeline, and the
//! batch commands behind the `sec` binary.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

use crate::policy::PolicyError;
use crate::select::SelectError;
use crate::simenv::SimError;
use crate::stratify::StratifyError;
use crate::train::TrainError;

pub use commands::{
    cmd_ablate, cmd_build_centroids, cmd_evaluate, cmd_gen_data, cmd_sweep_lambda, cmd_train, read_ablation_csv, read_sweep_csv, snapshot_name,
    AblationReport, AblationRow, EvaluateOutput, GenDataSummary, Inputs, ScoreHistogram, SweepReport, SweepRow,
    TrainOutput, ABLATION_HEADER, SWEEP_HEADER,
};
pub use config::{AblationConfig, EvalConfig, ExperimentConfig, PathsConfig, ReportConfig, StratConfig};
pub use pipeline::{
    build_bank, evaluate_policy, leveled_dataset, run_variant, train_policy, Variant, VariantResult,
};

pub const TOOL_VERSION: &str = concat!("sec ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("output path {0} already exists; pass --overwrite to replace it")]
    OutputExists(PathBuf),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("stratification failed: {0}")]
    Stratify(#[from] StratifyError),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("centroid selection: {0}")]
    Select(#[from] SelectError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for data and IO, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::OutputExists(_) => 2,
            HarnessError::Io { .. } | HarnessError::Stratify(_) => 3,
            HarnessError::Sim(e) => match e {
                SimError::InvalidConfig(_) => 2,
                _ => 3,
            },
            HarnessError::Train(e) => match e {
                TrainError::InvalidConfig(_) => 2,
                TrainError::EmptyLevel { .. } | TrainError::TargetOutOfRange { .. } => 3,
                _ => 4,
            },
            HarnessError::Select(e) => match e {
                SelectError::TooFewClusters(_) | SelectError::ThresholdRule(_) => 2,
                SelectError::InsufficientStates { .. }
                | SelectError::Io { .. }
                | SelectError::LevelCount { .. }
                | SelectError::Dimension { .. } => 3,
                _ => 4,
            },
            HarnessError::Policy(e) => match e {
                PolicyError::Checkpoint(_) | PolicyError::InvalidShape(_) => 3,
                _ => 4,
            },
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}
