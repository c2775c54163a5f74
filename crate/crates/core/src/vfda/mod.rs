//! Vicinal feature-statistics augmentation.
//!
//! Each encoder level summarizes its activations by per-channel mean and
//! standard deviation, models each statistic as Gaussian with a variance
//! built from the within-batch spread (local) times the spread of the
//! clients' momentum-accumulated statistics (global), and renormalizes the
//! activations to statistics drawn from that Gaussian. Labels are never
//! touched.

mod augment;
mod mixup;
mod momentum;
mod stats;

pub use augment::{
    reparameterize, sample_statistics, vfda_backward, vfda_forward, LayerTrace, Mode, NoiseDraw,
    SampledStats, VfdaCache, VfdaLayerState, VfdaSettings,
};
pub use mixup::{mixup, sample_mixup_lambda, DEFAULT_MIXUP_ALPHA};
pub use momentum::{emd_factor, emd_update, MomentumStats, MAX_MOMENTUM};
pub use stats::{channel_stats, column_variance, combine_variance, local_stat_variance, ChannelStats, PrototypeVariance};

use crate::tensor::TensorError;

/// Variance stabilizer inside the standard-deviation root and floor for sampled sigma.
pub const EPS_VAR: f64 = 1e-5;

/// Initial momentum factor before exponential decay over rounds.
pub const DEFAULT_ETA0: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VfdaError {
    #[error("channel count mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("feature map has an empty spatial extent")]
    EmptySpatial,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
