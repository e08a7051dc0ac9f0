use serde::{Deserialize, Serialize};

use crate::model::ParamStore;

use super::OptimError;

/// Hyperparameters of the moment-based update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Decay applied to the parameters directly, outside the moment estimates.
    #[default]
    AdamW,
    /// Classic Adam; decay (if any) is folded into the gradient as an L2 term.
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First/second moment estimates per parameter and the global step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub moments: Vec<Moments>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            moments: params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.tensor.len()],
                    v: vec![0.0; p.tensor.len()],
                })
                .collect(),
            step: 0,
        }
    }
}

/// One decoupled-decay update of a single parameter buffer at step `t` (1-based).
///
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ`, with the decay term using the
/// pre-update `θ`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let pre = theta[i];
        theta[i] = pre - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * weight_decay * pre;
    }
}

/// Classic Adam update with the decay folded into the gradient.
#[allow(clippy::too_many_arguments)]
fn adam_l2_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i] + weight_decay * theta[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub config: AdamWConfig,
    pub state: OptimizerState,
    /// Per-parameter flag; `false` exempts the parameter from weight decay.
    pub decay_mask: Vec<bool>,
}

impl Optimizer {
    /// Decay applies to every parameter unless `exclude_norm_and_bias` is set.
    pub fn new(
        kind: OptimizerKind,
        config: AdamWConfig,
        params: &ParamStore,
        exclude_norm_and_bias: bool,
    ) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            kind,
            config,
            state: OptimizerState::new(params),
            decay_mask: params
                .iter()
                .map(|p| !(exclude_norm_and_bias && p.kind.is_norm_or_bias()))
                .collect(),
        })
    }

    /// Applies one update using the gradient slot of every parameter.
    pub fn step(&mut self, params: &mut ParamStore, lr_now: f64) -> Result<(), OptimError> {
        if params.len() != self.state.moments.len() {
            return Err(OptimError::ShapeMismatch {
                param: format!("{} parameters vs {} moment slots", params.len(), self.state.moments.len()),
            });
        }
        for (p, mo) in params.iter().zip(&self.state.moments) {
            let grad_len = p.tensor.grad().map(|g| g.len());
            if grad_len != Some(p.tensor.len()) || mo.m.len() != p.tensor.len() {
                return Err(OptimError::ShapeMismatch { param: p.name.clone() });
            }
        }
        let t = self.state.step + 1;
        for ((p, mo), &decay) in params
            .iter_mut()
            .zip(self.state.moments.iter_mut())
            .zip(&self.decay_mask)
        {
            let wd = if decay { self.config.weight_decay } else { 0.0 };
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let theta = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::AdamW => {
                    adamw_update(theta, &grad, &mut mo.m, &mut mo.v, t, &self.config, lr_now, wd)
                }
                OptimizerKind::Adam => {
                    adam_l2_update(theta, &grad, &mut mo.m, &mut mo.v, t, &self.config, lr_now, wd)
                }
            }
        }
        self.state.step = t;
        Ok(())
    }
}
