use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::OptimError;

/// Cosine annealing from `eta_max` at epoch 0 to `eta_min` at epoch `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_epochs: usize,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self {
            eta_max: 1e-4,
            eta_min: 0.0,
            total_epochs: 50,
        }
    }
}

impl CosineSchedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.total_epochs >= 1 && self.eta_min <= self.eta_max && self.eta_min >= 0.0 && self.eta_max.is_finite() {
            Ok(())
        } else {
            Err(OptimError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// `η_t = η_min + ½(1 + cos(πt/T))(η_max − η_min)` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, sched: &CosineSchedule) -> Result<f64, OptimError> {
    sched.validate()?;
    let total = sched.total_epochs;
    if t > total {
        return Err(OptimError::EpochOutOfRange { t, total });
    }
    // η_min + (η_max − η_min) need not round back to η_max.
    if t == 0 {
        return Ok(sched.eta_max);
    }
    let c = (PI * t as f64 / total as f64).cos();
    let lr = sched.eta_min + 0.5 * (1.0 + c) * (sched.eta_max - sched.eta_min);
    Ok(lr.clamp(sched.eta_min, sched.eta_max))
}

/// Per-epoch learning rate policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Cosine {
        eta_max: f64,
        eta_min: f64,
    },
    Constant {
        lr: f64,
    },
}

impl LrSchedule {
    /// Learning rate for epoch `t` of a run lasting `total_epochs`.
    pub fn lr(&self, t: usize, total_epochs: usize) -> Result<f64, OptimError> {
        match *self {
            LrSchedule::Cosine { eta_max, eta_min } => cosine_lr(
                t,
                &CosineSchedule {
                    eta_max,
                    eta_min,
                    total_epochs,
                },
            ),
            LrSchedule::Constant { lr } if t <= total_epochs => Ok(lr),
            LrSchedule::Constant { .. } => Err(OptimError::EpochOutOfRange { t, total: total_epochs }),
        }
    }
}
