//! Desk-scale 3D encoder–decoder with VFDA after every encoder level, plus
//! the segmentation losses it trains on.

mod loss;
mod network;

pub use loss::{
    one_hot, soft_cross_entropy, soft_dice_loss, softmax, softmax_backward, softmax_cross_entropy, DICE_SMOOTH,
};
pub use network::{argmax_labels, Batch, ForwardCache, LossWeights, Network, NetworkConfig, KERNEL_SIZE};

use crate::tensor::TensorError;
use crate::vfda::VfdaError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vfda(#[from] VfdaError),
}
