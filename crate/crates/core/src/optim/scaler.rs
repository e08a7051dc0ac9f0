use serde::{Deserialize, Serialize};

use crate::model::{Bindings, ParamStore};
use crate::tensor::{round_to_half, Graph, TensorError, Var};

use super::{OptimError, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossScalerConfig {
    pub enabled: bool,
    pub init_scale: f64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
    pub growth_interval: u32,
    /// Round scaled gradients through binary16 before unscaling, so overflow
    /// and underflow behave as they would with half-precision gradients.
    pub emulate_half_grads: bool,
}

impl Default for LossScalerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            init_scale: 65536.0,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            growth_interval: 200,
            emulate_half_grads: false,
        }
    }
}

/// Dynamic loss scale with growth after a run of finite steps and backoff on overflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub config: LossScalerConfig,
    pub scale: f64,
    pub good_steps: u32,
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub stepped: bool,
    pub scale: f64,
}

impl LossScaler {
    pub fn new(config: LossScalerConfig) -> Result<Self, OptimError> {
        let ok = config.init_scale > 0.0
            && config.init_scale.is_finite()
            && config.growth_factor >= 1.0
            && config.backoff_factor > 0.0
            && config.backoff_factor < 1.0
            && config.growth_interval >= 1;
        if !ok {
            return Err(OptimError::InvalidConfig(format!("{config:?}")));
        }
        Ok(Self {
            scale: if config.enabled { config.init_scale } else { 1.0 },
            config,
            good_steps: 0,
            skipped: 0,
        })
    }

    /// Scale fixed at 1; non-finite gradients still skip the step.
    pub fn disabled() -> Self {
        Self::new(LossScalerConfig {
            enabled: false,
            ..LossScalerConfig::default()
        })
        .expect("default config is valid")
    }

    fn on_success(&mut self) {
        if !self.config.enabled {
            return;
        }
        self.good_steps += 1;
        if self.good_steps >= self.config.growth_interval {
            self.scale *= self.config.growth_factor;
            self.good_steps = 0;
        }
    }

    fn on_overflow(&mut self) {
        self.skipped += 1;
        self.good_steps = 0;
        if self.config.enabled {
            self.scale *= self.config.backoff_factor;
        }
    }
}

/// Backpropagates `loss · scale`, unscales, and steps unless the scaled loss or any
/// gradient is non-finite.
///
/// `bindings` must come from binding `params` on `g` as trainable leaves.
pub fn scaled_step(
    g: &mut Graph,
    loss: Var,
    bindings: &Bindings,
    params: &mut ParamStore,
    opt: &mut Optimizer,
    scaler: &mut LossScaler,
    lr_now: f64,
) -> Result<StepOutcome, OptimError> {
    let overflowed = |scaler: &mut LossScaler| {
        scaler.on_overflow();
        Ok(StepOutcome {
            stepped: false,
            scale: scaler.scale,
        })
    };
    let scaled = match g.scale(loss, scaler.scale) {
        Err(TensorError::NonFinite { .. }) => return overflowed(scaler),
        r => r?,
    };
    let mut grads = match g.backward(scaled) {
        Err(TensorError::NonFinite { .. }) => return overflowed(scaler),
        r => r?,
    };
    let collected = bindings.vars().iter().map(|&v| grads.take(v).map(|t| t.into_data())).collect();
    step_with_scaled_grads(collected, params, opt, scaler, lr_now)
}

/// Second half of [`scaled_step`]: takes gradients of the scaled loss, one
/// entry per parameter (`None` for parameters the loss does not touch).
pub fn step_with_scaled_grads(
    scaled_grads: Vec<Option<Vec<f64>>>,
    params: &mut ParamStore,
    opt: &mut Optimizer,
    scaler: &mut LossScaler,
    lr_now: f64,
) -> Result<StepOutcome, OptimError> {
    if scaled_grads.len() != params.len() {
        return Err(OptimError::ShapeMismatch {
            param: format!("{} gradients for {} parameters", scaled_grads.len(), params.len()),
        });
    }
    let inv = 1.0 / scaler.scale;
    let half = scaler.config.enabled && scaler.config.emulate_half_grads;
    let mut unscaled = Vec::with_capacity(scaled_grads.len());
    let mut finite = true;
    for (p, sg) in params.iter().zip(scaled_grads) {
        let mut gvec = sg.unwrap_or_else(|| vec![0.0; p.tensor.len()]);
        if gvec.len() != p.tensor.len() {
            return Err(OptimError::ShapeMismatch { param: p.name.clone() });
        }
        for v in gvec.iter_mut() {
            let s = if half { round_to_half(*v) } else { *v };
            *v = s * inv;
            finite &= v.is_finite();
        }
        unscaled.push(gvec);
    }
    if !finite {
        scaler.on_overflow();
        return Ok(StepOutcome {
            stepped: false,
            scale: scaler.scale,
        });
    }
    params.zero_grads();
    for (i, gvec) in unscaled.iter().enumerate() {
        params.tensor_mut(i).accumulate_grad(gvec)?;
    }
    opt.step(params, lr_now)?;
    scaler.on_success();
    Ok(StepOutcome {
        stepped: true,
        scale: scaler.scale,
    })
}
