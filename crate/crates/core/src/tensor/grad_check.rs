use super::Tensor;

/// Central-difference gradient of a scalar functional, one element at a time.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise `|a − b| / max(|a|, |b|, 1e-3)`.
///
/// The floor keeps components that are zero up to rounding from dominating.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let g = finite_difference_gradient(|t| t.sum(), &x, 1e-5);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::filled(&[1], 3.0);
        let g = finite_difference_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let g = finite_difference_gradient(|_| 42.0, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
