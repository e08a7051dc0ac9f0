//! Epoch loop, evaluation, checkpointing and multi-seed experiments.

mod checkpoint;
mod compare;
mod config;
mod engine;
mod experiment;

use std::path::Path;

pub use checkpoint::{architecture_fingerprint, Checkpoint, CheckpointMeta};
pub use compare::{
    compare_run_dirs, compare_summaries, multi_run_compare, ComparisonOutput, ExperimentPlan, BASELINE_LABEL, PROPOSED_LABEL,
};
pub use config::{ScheduleKind, TrainConfig};
pub use engine::{evaluate, train_one_epoch, EpochStats, EvalResult, LabeledImages, TrainState};
pub use experiment::{checkpoint_path, run_experiment, EpochRecord, IdAudit, RunOptions, RunOutcome, RunSummary};

use crate::data::{DataError, Split};
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::optim::OptimError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint was written for architecture {found}, configuration expects {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("runs cannot be paired: {0}")]
    Pairing(String),
    #[error("id audit failed: {0} training ids appear in evaluation data")]
    IdLeak(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn empty(split: Split) -> Self {
        TrainError::EmptySplit { split: split.name() }
    }
}
