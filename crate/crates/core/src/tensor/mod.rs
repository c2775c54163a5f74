//! Dense row-major `f64` tensors and the small fixed set of differentiable
//! ops the segmentation network is assembled from.
//!
//! Every forward op returns its output together with a typed cache; the
//! matching backward consumes that cache. There is no graph: callers chain
//! forward calls and walk the caches back in reverse order themselves.

mod conv;
mod grad_check;
mod ops;

use serde::{Deserialize, Serialize};

pub use conv::{conv3d_backward, conv3d_forward, conv_output_len, Conv3dCache, Conv3dGrads};
pub use grad_check::{finite_difference_gradient, max_relative_error};
pub use ops::{
    concat_channels, concat_channels_backward, relu, relu_backward, sgd_step, upsample_nearest,
    upsample_nearest_backward, ConcatCache, ReluCache, UpsampleCache,
};

/// Largest rank any op in this crate handles (batch, channel, three spatial).
pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?} but got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

/// A dense tensor of rank 1 to 5 stored row-major in a flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(TensorError::invalid(
                "Tensor::new",
                format!("rank must be in 1..={MAX_RANK}, got {}", shape.len()),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::invalid(
                "Tensor::new",
                format!(
                    "shape {shape:?} holds {expected} elements but {} were given",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= MAX_RANK,
            "tensor rank must be in 1..={MAX_RANK}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    /// Shape as `[B, C, H, W, S]`, or an error naming `op` if the rank is not 5.
    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5], TensorError> {
        <[usize; 5]>::try_from(self.shape.as_slice()).map_err(|_| {
            TensorError::invalid(op, format!("expected a rank-5 tensor, got shape {:?}", self.shape))
        })
    }

    /// Number of elements per (batch, channel) slice of a rank-5 tensor.
    pub fn spatial_len(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<(), TensorError> {
        if self.shape != shape {
            return Err(TensorError::mismatch(op, shape, &self.shape));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1; 6], vec![1.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn dims5_requires_rank_five() {
        let t = Tensor::zeros(&[1, 2, 3]);
        assert!(t.dims5("test").is_err());
        let t = Tensor::zeros(&[1, 2, 3, 4, 5]);
        assert_eq!(t.dims5("test").unwrap(), [1, 2, 3, 4, 5]);
        assert_eq!(t.spatial_len(), 60);
    }
}
