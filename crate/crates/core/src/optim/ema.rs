use crate::model::ParamStore;
use crate::Tensor;

use super::OptimError;

/// Exponential moving average of the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    decay: f64,
    shadow: Vec<Tensor>,
    updates: u64,
    warmup: bool,
    applied: bool,
}

/// Model weights set aside while the shadow is swapped in.
#[derive(Debug)]
#[must_use = "the swapped-out weights must be restored"]
pub struct EmaSwap {
    backup: Vec<Tensor>,
}

impl EmaState {
    /// Shadow starts as an exact copy of the current parameters.
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self, OptimError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(OptimError::InvalidConfig(format!("EMA decay {decay} not in [0, 1)")));
        }
        Ok(Self {
            decay,
            shadow: params.snapshot(),
            updates: 0,
            warmup: false,
            applied: false,
        })
    }

    /// Restores a previously saved shadow (e.g. from a checkpoint).
    pub fn from_parts(decay: f64, shadow: Vec<Tensor>, updates: u64) -> Result<Self, OptimError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(OptimError::InvalidConfig(format!("EMA decay {decay} not in [0, 1)")));
        }
        Ok(Self {
            decay,
            shadow,
            updates,
            warmup: false,
            applied: false,
        })
    }

    /// Caps the decay at `(1 + n)/(10 + n)` after `n` updates, so early
    /// updates track the model closely.
    pub fn with_warmup(mut self, warmup: bool) -> Self {
        self.warmup = warmup;
        self
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn warmup(&self) -> bool {
        self.warmup
    }

    /// Decay used by the next [`EmaState::update`].
    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_applied(&self) -> bool {
        self.applied
    }

    fn check_shapes(&self, params: &ParamStore) -> Result<(), OptimError> {
        if params.len() != self.shadow.len() {
            return Err(OptimError::ShapeMismatch {
                param: format!("{} parameters vs {} shadow tensors", params.len(), self.shadow.len()),
            });
        }
        for (p, s) in params.iter().zip(&self.shadow) {
            if p.tensor.shape() != s.shape() {
                return Err(OptimError::ShapeMismatch { param: p.name.clone() });
            }
        }
        Ok(())
    }

    /// `shadow ← α·shadow + (1 − α)·θ` with `α` = [`EmaState::effective_decay`], kept inside `[min, max]` of the two
    /// operands so rounding never leaves the convex hull.
    pub fn update(&mut self, params: &ParamStore) -> Result<(), OptimError> {
        if self.applied {
            return Err(OptimError::EmaAlreadyApplied);
        }
        self.check_shapes(params)?;
        let a = self.effective_decay();
        for (p, s) in params.iter().zip(self.shadow.iter_mut()) {
            for (sv, &tv) in s.data_mut().iter_mut().zip(p.tensor.data()) {
                let mixed = a * *sv + (1.0 - a) * tv;
                *sv = mixed.clamp(sv.min(tv), sv.max(tv));
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Swaps the shadow into the model for evaluation.
    pub fn apply(&mut self, params: &mut ParamStore) -> Result<EmaSwap, OptimError> {
        if self.applied {
            return Err(OptimError::EmaAlreadyApplied);
        }
        self.check_shapes(params)?;
        let mut backup = Vec::with_capacity(self.shadow.len());
        for (p, s) in params.iter_mut().zip(&self.shadow) {
            backup.push(p.tensor.clone());
            p.tensor.data_mut().copy_from_slice(s.data());
        }
        self.applied = true;
        Ok(EmaSwap { backup })
    }

    /// Puts the swapped-out model weights back, bit for bit.
    pub fn restore(&mut self, params: &mut ParamStore, swap: EmaSwap) -> Result<(), OptimError> {
        if !self.applied {
            return Err(OptimError::EmaNotApplied);
        }
        for (p, b) in params.iter_mut().zip(swap.backup) {
            p.tensor = b;
        }
        self.applied = false;
        Ok(())
    }
}
