//! Feature renormalization with sampled statistics, and the per-level layer
//! state that drives it during training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    channel_stats, combine_variance, emd_factor, local_stat_variance, ChannelStats, MomentumStats,
    PrototypeVariance, VfdaError,
};
use crate::tensor::Tensor;

/// Standard-normal draws for one forward pass, `B×C` each.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps_mu: Vec<f64>,
    pub eps_sigma: Vec<f64>,
}

impl NoiseDraw {
    /// All `eps_mu` draws first, then all `eps_sigma`, both row-major over (b, c).
    pub fn sample(batch: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let n = batch * channels;
        let eps_mu = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let eps_sigma = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        NoiseDraw { eps_mu, eps_sigma }
    }

    pub fn zeros(batch: usize, channels: usize) -> Self {
        NoiseDraw {
            eps_mu: vec![0.0; batch * channels],
            eps_sigma: vec![0.0; batch * channels],
        }
    }
}

/// Sampled replacement statistics, `B×C` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledStats {
    pub mu_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    /// Entries where `sigma_hat` hit the `sqrt(eps_var)` floor.
    pub sigma_floored: Vec<bool>,
}

/// `mu_hat = mu + eps_mu·sqrt(var_mu)`, `sigma_hat = max(sigma + eps_sigma·sqrt(var_sigma), sqrt(eps_var))`.
pub fn reparameterize(
    stats: &ChannelStats,
    combined: &PrototypeVariance,
    noise: &NoiseDraw,
    eps_var: f64,
) -> Result<SampledStats, VfdaError> {
    let (b, c) = (stats.batch(), stats.channels());
    if combined.channels() != c {
        return Err(VfdaError::ChannelMismatch {
            expected: c,
            actual: combined.channels(),
        });
    }
    if noise.eps_mu.len() != b * c || noise.eps_sigma.len() != b * c {
        return Err(VfdaError::Invalid(format!(
            "noise draw does not cover {b}x{c} statistics"
        )));
    }
    let floor = eps_var.sqrt();
    let mut mu_hat = Vec::with_capacity(b * c);
    let mut sigma_hat = Vec::with_capacity(b * c);
    let mut sigma_floored = Vec::with_capacity(b * c);
    for i in 0..b * c {
        let ch = i % c;
        mu_hat.push(stats.mu()[i] + noise.eps_mu[i] * combined.var_mu[ch].sqrt());
        let s = stats.sigma()[i] + noise.eps_sigma[i] * combined.var_sigma[ch].sqrt();
        sigma_floored.push(s < floor);
        sigma_hat.push(s.max(floor));
    }
    Ok(SampledStats {
        mu_hat,
        sigma_hat,
        sigma_floored,
    })
}

/// Draws fresh noise and reparameterizes.
pub fn sample_statistics(
    stats: &ChannelStats,
    combined: &PrototypeVariance,
    rng: &mut impl Rng,
    eps_var: f64,
) -> Result<SampledStats, VfdaError> {
    let noise = NoiseDraw::sample(stats.batch(), stats.channels(), rng);
    reparameterize(stats, combined, &noise, eps_var)
}

#[derive(Debug, Clone)]
pub struct VfdaCache {
    shape: Vec<usize>,
    normalized: Vec<f64>,
    sigma: Vec<f64>,
    sigma_hat: Vec<f64>,
    sigma_floored: Vec<bool>,
    passthrough: Vec<bool>,
}

/// `Z_hat = sigma_hat · (Z − mu) / sigma + mu_hat`, broadcast over space.
///
/// Slices whose sampled statistics equal the originals bit-for-bit are copied
/// through unchanged, so a zero perturbation is an exact identity.
pub fn vfda_forward(
    z: &Tensor,
    stats: &ChannelStats,
    sampled: &SampledStats,
) -> Result<(Tensor, VfdaCache), VfdaError> {
    let [b, c, ..] = z.dims5("vfda_forward")?;
    if stats.batch() != b || stats.channels() != c {
        return Err(VfdaError::Invalid(format!(
            "statistics are {}x{} but the feature map is {:?}",
            stats.batch(),
            stats.channels(),
            z.shape()
        )));
    }
    if sampled.mu_hat.len() != b * c || sampled.sigma_hat.len() != b * c {
        return Err(VfdaError::Invalid("sampled statistics do not match the feature map".into()));
    }
    let n = z.spatial_len();
    let mut out = Vec::with_capacity(z.len());
    let mut normalized = Vec::with_capacity(z.len());
    let mut passthrough = Vec::with_capacity(b * c);
    for (i, slice) in z.data().chunks_exact(n).enumerate() {
        let (mu, sigma) = (stats.mu()[i], stats.sigma()[i]);
        let (mu_hat, sigma_hat) = (sampled.mu_hat[i], sampled.sigma_hat[i]);
        let inv = if sigma > 0.0 { 1.0 / sigma } else { 0.0 };
        normalized.extend(slice.iter().map(|v| (v - mu) * inv));
        let same = mu_hat.to_bits() == mu.to_bits() && sigma_hat.to_bits() == sigma.to_bits();
        passthrough.push(same);
        if same {
            out.extend_from_slice(slice);
        } else {
            let zn = &normalized[i * n..];
            out.extend(zn.iter().map(|v| sigma_hat * v + mu_hat));
        }
    }
    let cache = VfdaCache {
        shape: z.shape().to_vec(),
        normalized,
        sigma: stats.sigma().to_vec(),
        sigma_hat: sampled.sigma_hat.clone(),
        sigma_floored: sampled.sigma_floored.clone(),
        passthrough,
    };
    Ok((Tensor::new(z.shape().to_vec(), out)?, cache))
}

/// Gradient of [`vfda_forward`] with respect to `Z`.
///
/// `mu` and `sigma` are differentiated as functions of `Z`, both inside the
/// normalization and inside `mu_hat = mu + const`, `sigma_hat = sigma + const`.
/// The noise and the variance estimates are constants. A floored `sigma_hat`
/// is constant.
pub fn vfda_backward(grad_out: &Tensor, cache: &VfdaCache) -> Result<Tensor, VfdaError> {
    grad_out.expect_shape("vfda_backward", &cache.shape)?;
    let n = grad_out.spatial_len();
    let inv_n = 1.0 / n as f64;
    let mut grad = Vec::with_capacity(grad_out.len());
    for (i, g) in grad_out.data().chunks_exact(n).enumerate() {
        if cache.passthrough[i] {
            grad.extend_from_slice(g);
            continue;
        }
        let zn = &cache.normalized[i * n..(i + 1) * n];
        let mean_g = g.iter().sum::<f64>() * inv_n;
        let mean_gz = g.iter().zip(zn).map(|(a, b)| a * b).sum::<f64>() * inv_n;
        let ratio = if cache.sigma[i] > 0.0 {
            cache.sigma_hat[i] / cache.sigma[i]
        } else {
            0.0
        };
        let sigma_path = if cache.sigma_floored[i] { 0.0 } else { mean_gz };
        grad.extend(
            g.iter()
                .zip(zn)
                .map(|(&gv, &z)| ratio * (gv - mean_g - z * mean_gz) + mean_g + z * sigma_path),
        );
    }
    Ok(Tensor::new(cache.shape.clone(), grad)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Switches shared by every VFDA layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfdaSettings {
    pub enabled: bool,
    /// When false, the uploaded statistics are the last batch's means (momentum 0).
    pub use_emd: bool,
    /// When false, the global factor in the combined variance is all ones.
    pub use_global_variance: bool,
    pub apply_prob: f64,
    pub eta0: f64,
    pub eps_var: f64,
}

impl Default for VfdaSettings {
    fn default() -> Self {
        VfdaSettings {
            enabled: true,
            use_emd: true,
            use_global_variance: true,
            apply_prob: 1.0,
            eta0: super::DEFAULT_ETA0,
            eps_var: super::EPS_VAR,
        }
    }
}

/// What one layer did on its last training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerTrace {
    pub stats_computed: bool,
    pub momentum_updated: bool,
    pub global_factor_used: bool,
    pub augmented: bool,
}

/// Per-encoder-level VFDA state owned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct VfdaLayerState {
    pub momentum: MomentumStats,
    pub global_variance: PrototypeVariance,
    pub enabled: bool,
    pub mode: Mode,
    /// Replaces the estimated combined variance; used to freeze it in gradient checks.
    pub pinned_variance: Option<PrototypeVariance>,
    pub last_trace: LayerTrace,
}

impl VfdaLayerState {
    pub fn new(channels: usize) -> Self {
        VfdaLayerState {
            momentum: MomentumStats::new(channels),
            global_variance: PrototypeVariance::zeros(channels),
            enabled: true,
            mode: Mode::Train,
            pinned_variance: None,
            last_trace: LayerTrace::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.momentum.channels()
    }

    /// Applies the layer. Returns `None` for the cache when the layer acted as
    /// the identity (eval mode, disabled, or skipped by `apply_prob`).
    pub fn forward(
        &mut self,
        z: &Tensor,
        settings: &VfdaSettings,
        round: u32,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Option<VfdaCache>), VfdaError> {
        self.last_trace = LayerTrace::default();
        if self.mode == Mode::Eval || !self.enabled || !settings.enabled {
            return Ok((z.clone(), None));
        }
        let stats = channel_stats(z, settings.eps_var)?;
        self.last_trace.stats_computed = true;
        let eta = if settings.use_emd {
            emd_factor(round, settings.eta0)
        } else {
            0.0
        };
        self.momentum.update_with_factor(&stats, eta, round)?;
        self.last_trace.momentum_updated = true;

        let combined = match &self.pinned_variance {
            Some(v) => v.clone(),
            None => {
                let local = local_stat_variance(&stats);
                if settings.use_global_variance {
                    self.last_trace.global_factor_used = true;
                    combine_variance(&local, &self.global_variance)?
                } else {
                    combine_variance(&local, &PrototypeVariance::ones(local.channels()))?
                }
            }
        };

        let apply = settings.apply_prob >= 1.0 || rng.random::<f64>() < settings.apply_prob;
        let noise = NoiseDraw::sample(stats.batch(), stats.channels(), rng);
        if !apply {
            return Ok((z.clone(), None));
        }
        let sampled = reparameterize(&stats, &combined, &noise, settings.eps_var)?;
        let (out, cache) = vfda_forward(z, &stats, &sampled)?;
        self.last_trace.augmented = true;
        Ok((out, Some(cache)))
    }
}
