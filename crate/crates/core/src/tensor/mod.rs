//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation applied to its variables during the
//! forward pass. [`Graph::backward`] walks the records in reverse creation
//! order and returns the gradient of a scalar loss with respect to every leaf
//! that was registered with [`Graph::param`]. A graph supports exactly one
//! backward sweep; build a fresh one per training step.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{BatchNormMode, BatchStats, Gradients, Graph, Var};

use std::fmt;

/// Operation kinds understood by the tape, used in error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv2d,
    MatMul,
    Add,
    Mul,
    Silu,
    Sigmoid,
    BatchNorm,
    GlobalAvgPool,
    Reshape,
    Mean,
    Sum,
    Scale,
    LogSoftmax,
    Leaf,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise-conv2d",
            OpKind::PointwiseConv2d => "pointwise-conv2d",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Silu => "silu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BatchNorm => "batchnorm",
            OpKind::GlobalAvgPool => "global-avg-pool",
            OpKind::Reshape => "reshape",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::Leaf => "leaf",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: OpKind, detail: String },
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttribute { op: OpKind, detail: String },
    #[error("{op}: produced non-finite output")]
    NonFinite { op: OpKind },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this graph; higher-order or repeated sweeps are unsupported")]
    AlreadyBackpropagated,
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("function under gradient check is not deterministic (two evaluations differ)")]
    NonDeterministic,
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub(crate) fn shape_err(op: OpKind, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .field("requires_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Enables or disables the gradient slot. Enabling allocates a zeroed buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient slot. No-op when the tensor does not require grad.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), TensorError> {
        if delta.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                OpKind::Reshape,
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
        })
    }

    /// Copy whose values are rounded through IEEE half precision, emulating
    /// storage in an FP16 buffer. Values beyond the half range become infinite.
    pub fn half_view(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| round_to_half(v)).collect(),
            grad: None,
        }
    }

    /// Copy rounded through `f32`.
    pub fn single_view(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            grad: None,
        }
    }

    pub(crate) fn dims4(&self, op: OpKind) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(shape_err(op, format!("expected N×C×H×W input, got {s:?}"))),
        }
    }
}

pub fn round_to_half(v: f64) -> f64 {
    half::f16::from_f64(v).to_f64()
}
