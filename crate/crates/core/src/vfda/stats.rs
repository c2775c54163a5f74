use serde::{Deserialize, Serialize};

use super::VfdaError;
use crate::tensor::Tensor;

/// Per-(batch element, channel) spatial mean and standard deviation of a
/// `B×C×H×W×S` feature map, stored row-major as `B×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    batch: usize,
    channels: usize,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn new(batch: usize, channels: usize, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, VfdaError> {
        let n = batch * channels;
        if mu.len() != n || sigma.len() != n {
            return Err(VfdaError::Invalid(format!(
                "statistics for {batch}x{channels} need {n} entries, got mu {} / sigma {}",
                mu.len(),
                sigma.len()
            )));
        }
        Ok(ChannelStats {
            batch,
            channels,
            mu,
            sigma,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Mean over the batch axis of `mu` and of `sigma`, each of length C.
    pub fn batch_means(&self) -> (Vec<f64>, Vec<f64>) {
        (
            column_means(&self.mu, self.batch, self.channels),
            column_means(&self.sigma, self.batch, self.channels),
        )
    }
}

/// Per-channel variances of the mean and standard-deviation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeVariance {
    pub var_mu: Vec<f64>,
    pub var_sigma: Vec<f64>,
}

impl PrototypeVariance {
    pub fn zeros(channels: usize) -> Self {
        Self::filled(channels, 0.0)
    }

    pub fn ones(channels: usize) -> Self {
        Self::filled(channels, 1.0)
    }

    pub fn filled(channels: usize, value: f64) -> Self {
        PrototypeVariance {
            var_mu: vec![value; channels],
            var_sigma: vec![value; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.var_mu.len()
    }

    pub fn is_zero(&self) -> bool {
        self.var_mu.iter().chain(&self.var_sigma).all(|&v| v == 0.0)
    }

    /// Finite, non-negative, and both vectors the same length.
    pub fn is_valid(&self) -> bool {
        self.var_mu.len() == self.var_sigma.len()
            && self.var_mu.iter().chain(&self.var_sigma).all(|v| v.is_finite() && *v >= 0.0)
    }
}

pub(crate) fn column_means(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut means = vec![0.0; cols];
    for row in values.chunks_exact(cols).take(rows) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= rows as f64;
    }
    means
}

/// Population (divide-by-`rows`) variance of each column of a row-major matrix.
pub fn column_variance(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let means = column_means(values, rows, cols);
    let mut var = vec![0.0; cols];
    for row in values.chunks_exact(cols).take(rows) {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&means) {
            let d = v - m;
            *acc += d * d;
        }
    }
    for (j, v) in var.iter_mut().enumerate() {
        // a constant column has exactly zero spread even when its mean rounds
        let Some(&first) = values.get(j) else { continue };
        if values.chunks_exact(cols).take(rows).all(|row| row[j] == first) {
            *v = 0.0;
        } else {
            *v /= rows as f64;
        }
    }
    var
}

/// Spatial mean and `sqrt(population variance + eps_var)` for every (b, c).
pub fn channel_stats(z: &Tensor, eps_var: f64) -> Result<ChannelStats, VfdaError> {
    let [b, c, ..] = z.dims5("channel_stats")?;
    let n = z.spatial_len();
    if n == 0 {
        return Err(VfdaError::EmptySpatial);
    }
    let mut mu = Vec::with_capacity(b * c);
    let mut sigma = Vec::with_capacity(b * c);
    for slice in z.data().chunks_exact(n) {
        let m = slice.iter().sum::<f64>() / n as f64;
        let var = slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mu.push(m);
        sigma.push((var + eps_var).sqrt());
    }
    ChannelStats::new(b, c, mu, sigma)
}

/// Variance of the statistics across the batch axis, per channel.
pub fn local_stat_variance(stats: &ChannelStats) -> PrototypeVariance {
    PrototypeVariance {
        var_mu: column_variance(&stats.mu, stats.batch, stats.channels),
        var_sigma: column_variance(&stats.sigma, stats.batch, stats.channels),
    }
}

/// Elementwise product of the client-local and the shared variances.
pub fn combine_variance(
    local: &PrototypeVariance,
    global: &PrototypeVariance,
) -> Result<PrototypeVariance, VfdaError> {
    if local.channels() != global.channels() {
        return Err(VfdaError::ChannelMismatch {
            expected: local.channels(),
            actual: global.channels(),
        });
    }
    let mul = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect();
    Ok(PrototypeVariance {
        var_mu: mul(&local.var_mu, &global.var_mu),
        var_sigma: mul(&local.var_sigma, &global.var_sigma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vfda::EPS_VAR;

    fn fmap(shape: [usize; 5], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn four_values() {
        let s = channel_stats(&fmap([1, 1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), EPS_VAR).unwrap();
        assert_eq!(s.mu(), &[2.5]);
        assert!((s.sigma()[0] - (1.25f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((s.sigma()[0] - 1.118038).abs() < 1e-6);
    }

    #[test]
    fn constant_map_has_stabilizer_sigma() {
        let s = channel_stats(&Tensor::filled(&[1, 1, 2, 2, 2], 7.0), EPS_VAR).unwrap();
        assert_eq!(s.mu(), &[7.0]);
        assert_eq!(s.sigma(), &[EPS_VAR.sqrt()]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let a = [1.0, 5.0, 2.0, 2.0];
        let b = [0.0, -1.0, 3.0, 9.0];
        let ab: Vec<f64> = a.iter().chain(&b).copied().collect();
        let ba: Vec<f64> = b.iter().chain(&a).copied().collect();
        let s1 = channel_stats(&fmap([2, 1, 1, 2, 2], &ab), EPS_VAR).unwrap();
        let s2 = channel_stats(&fmap([2, 1, 1, 2, 2], &ba), EPS_VAR).unwrap();
        assert_eq!(s1.mu()[0], s2.mu()[1]);
        assert_eq!(s1.mu()[1], s2.mu()[0]);
        assert_eq!(s1.sigma()[0], s2.sigma()[1]);
    }

    #[test]
    fn rejects_empty_spatial_extent() {
        let z = Tensor::zeros(&[1, 2, 0, 2, 2]);
        assert!(matches!(channel_stats(&z, EPS_VAR), Err(VfdaError::EmptySpatial)));
    }

    #[test]
    fn local_variance_examples() {
        let s = ChannelStats::new(2, 1, vec![2.0, 4.0], vec![1.0, 1.0]).unwrap();
        let v = local_stat_variance(&s);
        assert_eq!(v.var_mu, vec![1.0]);
        assert_eq!(v.var_sigma, vec![0.0]);

        let single = ChannelStats::new(1, 3, vec![1.0, 2.0, 3.0], vec![0.5, 0.6, 0.7]).unwrap();
        assert!(local_stat_variance(&single).is_zero());
    }

    #[test]
    fn combine_examples() {
        let local = PrototypeVariance::filled(3, 0.5);
        let v = combine_variance(&local, &PrototypeVariance::ones(3)).unwrap();
        assert_eq!(v.var_mu, vec![0.5; 3]);
        assert!(combine_variance(&local, &PrototypeVariance::zeros(3)).unwrap().is_zero());
        assert!(combine_variance(&PrototypeVariance::zeros(3), &local).unwrap().is_zero());
        assert!(matches!(
            combine_variance(&local, &PrototypeVariance::ones(2)),
            Err(VfdaError::ChannelMismatch { .. })
        ));
    }
}
