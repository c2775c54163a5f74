//! Voxel-wise cross-entropy and soft Dice over a `B×K×H×W×S` class axis.

use super::SegError;
use crate::tensor::Tensor;

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Softmax over the channel axis of a rank-5 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor, SegError> {
    let [b, k, ..] = logits.dims5("softmax")?;
    let n = logits.spatial_len();
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for bi in 0..b {
        let base = bi * k * n;
        for v in 0..n {
            let max = (0..k).map(|c| src[base + c * n + v]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..k {
                let e = (src[base + c * n + v] - max).exp();
                dst[base + c * n + v] = e;
                total += e;
            }
            for c in 0..k {
                dst[base + c * n + v] /= total;
            }
        }
    }
    Ok(out)
}

/// Pulls a gradient with respect to softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor, SegError> {
    let [b, k, ..] = probs.dims5("softmax_backward")?;
    grad_probs.expect_shape("softmax_backward", probs.shape())?;
    let n = probs.spatial_len();
    let p = probs.data();
    let g = grad_probs.data();
    let mut out = Tensor::zeros(probs.shape());
    let dst = out.data_mut();
    for bi in 0..b {
        let base = bi * k * n;
        for v in 0..n {
            let dot: f64 = (0..k).map(|c| p[base + c * n + v] * g[base + c * n + v]).sum();
            for c in 0..k {
                let i = base + c * n + v;
                dst[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Ok(out)
}

/// One-hot `B×K×H×W×S` targets from a flat `B×H×W×S` label array.
pub fn one_hot(labels: &[u8], shape: [usize; 5]) -> Result<Tensor, SegError> {
    let [b, k, h, w, s] = shape;
    let n = h * w * s;
    if labels.len() != b * n {
        return Err(SegError::Shape(format!(
            "{} labels for a {b}x{h}x{w}x{s} batch",
            labels.len()
        )));
    }
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(SegError::LabelOutOfRange { label: l, classes: k });
        }
        let (bi, v) = (i / n, i % n);
        dst[(bi * k + l) * n + v] = 1.0;
    }
    Ok(out)
}

/// Mean over voxels of `−Σ_k t_k · log softmax_k` and its gradient in the logits.
///
/// Targets must sum to one over the class axis at every voxel.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor), SegError> {
    let [b, k, ..] = logits.dims5("soft_cross_entropy")?;
    targets.expect_shape("soft_cross_entropy", logits.shape())?;
    let n = logits.spatial_len();
    let voxels = (b * n) as f64;
    let probs = softmax(logits)?;
    let x = logits.data();
    let t = targets.data();
    let mut loss = 0.0;
    for bi in 0..b {
        let base = bi * k * n;
        for v in 0..n {
            let max = (0..k).map(|c| x[base + c * n + v]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (x[base + c * n + v] - max).exp()).sum::<f64>().ln();
            for c in 0..k {
                let tv = t[base + c * n + v];
                if tv != 0.0 {
                    loss -= tv * (x[base + c * n + v] - lse);
                }
            }
        }
    }
    let grad = Tensor::from_fn(logits.shape(), |i| (probs.data()[i] - t[i]) / voxels);
    Ok((loss / voxels, grad))
}

/// Cross-entropy against integer labels.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor), SegError> {
    let shape = logits.dims5("softmax_cross_entropy")?;
    let targets = one_hot(labels, shape)?;
    soft_cross_entropy(logits, &targets)
}

/// `1 − mean_k (2·Σ p·t + s) / (Σ p + Σ t + s)` with sums over batch and space.
pub fn soft_dice_loss(probs: &Tensor, targets: &Tensor) -> Result<(f64, Tensor), SegError> {
    let [b, k, ..] = probs.dims5("soft_dice_loss")?;
    targets.expect_shape("soft_dice_loss", probs.shape())?;
    let n = probs.spatial_len();
    let p = probs.data();
    let t = targets.data();
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut tsum = vec![0.0; k];
    for bi in 0..b {
        for c in 0..k {
            let base = (bi * k + c) * n;
            for i in base..base + n {
                inter[c] += p[i] * t[i];
                psum[c] += p[i];
                tsum[c] += t[i];
            }
        }
    }
    let s = DICE_SMOOTH;
    let mut dice_sum = 0.0;
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for c in 0..k {
        num[c] = 2.0 * inter[c] + s;
        den[c] = psum[c] + tsum[c] + s;
        dice_sum += num[c] / den[c];
    }
    let loss = 1.0 - dice_sum / k as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    for bi in 0..b {
        for c in 0..k {
            let base = (bi * k + c) * n;
            let d2 = den[c] * den[c];
            for i in base..base + n {
                g[i] = -(2.0 * t[i] * den[c] - num[c]) / d2 / k as f64;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    fn random_labels(n: usize, k: u8, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..k)).collect()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(&[1, 2, 2, 2, 2]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 1, 0, 0, 0, 1, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!((loss - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let labels = [0u8, 1];
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Tensor::new(vec![1, 2, 1, 1, 2], vec![margin, 0.0, 0.0, margin]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = random(&[1, 3, 2, 2, 2], 1);
        let labels = random_labels(8, 3, 2);
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let fd = finite_difference_gradient(|t| softmax_cross_entropy(t, &labels).unwrap().0, &logits, 1e-5);
        assert!(max_relative_error(&g, &fd) < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Tensor::zeros(&[1, 2, 1, 1, 2]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 2]),
            Err(SegError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn softmax_channels_sum_to_one() {
        let p = softmax(&random(&[2, 4, 3, 2, 2], 3).map(|v| v * 30.0)).unwrap();
        let n = 12;
        for b in 0..2 {
            for v in 0..n {
                let s: f64 = (0..4).map(|c| p.data()[(b * 4 + c) * n + v]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_probabilities_give_zero_dice_loss() {
        let t = one_hot(&random_labels(8, 2, 4), [1, 2, 2, 2, 2]).unwrap();
        let (loss, _) = soft_dice_loss(&t, &t).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn inverted_probabilities() {
        let t = one_hot(&random_labels(8, 2, 5), [1, 2, 2, 2, 2]).unwrap();
        let inv = t.map(|v| 1.0 - v);
        let (loss, _) = soft_dice_loss(&inv, &t).unwrap();
        let v = 8.0;
        assert!((loss - (1.0 - 1.0 / (v + 1.0))).abs() < 1e-15);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let p = softmax(&random(&[1, 2, 2, 2, 2], 6)).unwrap();
        let t = one_hot(&random_labels(8, 2, 7), [1, 2, 2, 2, 2]).unwrap();
        let (_, g) = soft_dice_loss(&p, &t).unwrap();
        let fd = finite_difference_gradient(|x| soft_dice_loss(x, &t).unwrap().0, &p, 1e-5);
        assert!(max_relative_error(&g, &fd) < 1e-6);
    }

    #[test]
    fn dice_through_softmax_matches_finite_differences() {
        let logits = random(&[2, 3, 2, 1, 2], 8);
        let t = one_hot(&random_labels(8, 3, 9), [2, 3, 2, 1, 2]).unwrap();
        let p = softmax(&logits).unwrap();
        let (_, gp) = soft_dice_loss(&p, &t).unwrap();
        let g = softmax_backward(&p, &gp).unwrap();
        let fd = finite_difference_gradient(|x| soft_dice_loss(&softmax(x).unwrap(), &t).unwrap().0, &logits, 1e-5);
        assert!(max_relative_error(&g, &fd) < 1e-6);
    }
}
