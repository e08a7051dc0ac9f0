use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Batch-norm affine parameters and biases; optionally excluded from weight decay.
    pub fn is_norm_or_bias(self) -> bool {
        !matches!(self, ParamKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Ordered collection of learnable tensors. Indices are stable for the
/// lifetime of a network and double as optimizer/EMA slot ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph variables for every parameter of a store, by store index.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Replaces the binding of one parameter, e.g. to differentiate w.r.t. it alone.
    pub fn set(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, mut tensor: Tensor) -> usize {
        tensor.set_requires_grad(true);
        self.params.push(Param {
            name: name.into(),
            kind,
            tensor,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Registers every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), trainable))
            .collect();
        Bindings { vars }
    }

    /// Moves gradients for bound parameters into each tensor's gradient slot (accumulating).
    pub fn absorb_grads(&mut self, bindings: &Bindings, grads: &mut Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.vars) {
            if let Some(g) = grads.take(v) {
                p.tensor
                    .accumulate_grad(g.data())
                    .expect("gradient shape matches its parameter");
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Flat copy of all values, in store order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.set_requires_grad(false);
                t
            })
            .collect()
    }
}

/// He-normal sample: `N(0, sqrt(2 / fan_in))` for every element of `shape`.
pub fn he_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Bias vectors start at zero.
pub fn zero_bias(len: usize) -> Tensor {
    Tensor::zeros(&[len])
}
