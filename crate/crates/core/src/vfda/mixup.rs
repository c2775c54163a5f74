use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::VfdaError;
use crate::tensor::Tensor;

pub const DEFAULT_MIXUP_ALPHA: f64 = 0.2;

/// Convex combination `lambda·(x1, y1) + (1 − lambda)·(x2, y2)` of two inputs
/// and their one-hot (or already soft) label tensors.
pub fn mixup(
    x1: &Tensor,
    y1: &Tensor,
    x2: &Tensor,
    y2: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor), VfdaError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(VfdaError::Invalid(format!("mixup lambda must be in [0, 1], got {lambda}")));
    }
    x2.expect_shape("mixup", x1.shape())?;
    y2.expect_shape("mixup", y1.shape())?;
    let mix = |a: &Tensor, b: &Tensor| {
        Tensor::from_fn(a.shape(), |i| {
            let (u, v) = (a.data()[i], b.data()[i]);
            // exact endpoints at lambda ∈ {0, 1}
            if lambda == 1.0 {
                u
            } else if lambda == 0.0 {
                v
            } else {
                lambda * u + (1.0 - lambda) * v
            }
        })
    };
    Ok((mix(x1, x2), mix(y1, y2)))
}

/// `lambda ~ Beta(alpha, alpha)`.
pub fn sample_mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64, VfdaError> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| VfdaError::Invalid(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}
