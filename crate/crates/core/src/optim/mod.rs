//! Optimizer, learning-rate schedule, weight averaging and loss scaling.

mod adamw;
mod ema;
mod scaler;
mod schedule;

pub use adamw::{adamw_update, AdamWConfig, Moments, Optimizer, OptimizerKind, OptimizerState};
pub use ema::{EmaState, EmaSwap};
pub use scaler::{scaled_step, step_with_scaled_grads, LossScaler, LossScalerConfig, StepOutcome};
pub use schedule::{cosine_lr, CosineSchedule, LrSchedule};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch for parameter {param}")]
    ShapeMismatch { param: String },
    #[error("epoch {t} outside schedule range [0, {total}]")]
    EpochOutOfRange { t: usize, total: usize },
    #[error("EMA weights are already applied")]
    EmaAlreadyApplied,
    #[error("EMA weights are not applied")]
    EmaNotApplied,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
