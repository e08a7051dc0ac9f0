//! EfficientNetV2-style network: profiles, blocks, classifier head, and the
//! softmax / cross-entropy objective.

mod blocks;
mod loss;
mod network;
mod params;
mod profile;

pub use blocks::{
    se_block, se_hidden_channels, Block, BnRunning, ConvBn, Ctx, FusedMbConv, LayerBuilder, MbConv, Mode,
    SeBlock, SeVars, BN_EPS, BN_MOMENTUM,
};
pub use loss::{cross_entropy, softmax};
pub use network::{ClassifierHead, Network, NetworkOutput};
pub use params::{he_init, zero_bias, Bindings, Param, ParamKind, ParamStore};
pub use profile::{BlockKind, NetworkProfile, StageSpec};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("stage {stage}: stride-2 reduction applied to {side}×{side} feature map")]
    SpatialUnderflow { stage: usize, side: usize },
    #[error("{kind}: unsupported expansion factor {expansion}")]
    InvalidExpansion { kind: &'static str, expansion: usize },
    #[error("squeeze-excitation ratio {0} outside (0, 1]")]
    InvalidSeRatio(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("bad input: {0}")]
    InputShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
