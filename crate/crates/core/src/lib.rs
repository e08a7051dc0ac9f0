//! Training and evaluation toolkit for five-class chest X-ray classification
//! with an EfficientNetV2-style network, running entirely on the CPU.

pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Tensor, TensorError, Var};
