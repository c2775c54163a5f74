use serde::{Deserialize, Serialize};

use super::{ChannelStats, VfdaError};

/// Upper bound on the momentum factor so the update stays a convex combination.
pub const MAX_MOMENTUM: f64 = 0.99;

/// Momentum factor for round `round`: `min(eta0 · e^(−round), 0.99)`.
pub fn emd_factor(round: u32, eta0: f64) -> f64 {
    (eta0 * (-f64::from(round)).exp()).min(MAX_MOMENTUM)
}

/// Exponentially accumulated per-channel statistics of one encoder level at
/// one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumStats {
    pub mu_bar: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    pub initialized: bool,
    pub round_of_last_update: u32,
}

impl MomentumStats {
    pub fn new(channels: usize) -> Self {
        MomentumStats {
            mu_bar: vec![0.0; channels],
            sigma_bar: vec![0.0; channels],
            initialized: false,
            round_of_last_update: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mu_bar.len()
    }

    /// Folds the batch-averaged statistics in with an explicit momentum `eta`.
    ///
    /// The first update copies the batch mean.
    pub fn update_with_factor(&mut self, stats: &ChannelStats, eta: f64, round: u32) -> Result<(), VfdaError> {
        if stats.channels() != self.channels() {
            return Err(VfdaError::ChannelMismatch {
                expected: self.channels(),
                actual: stats.channels(),
            });
        }
        let (mu, sigma) = stats.batch_means();
        if self.initialized {
            let blend = |acc: &mut [f64], fresh: &[f64]| {
                for (a, f) in acc.iter_mut().zip(fresh) {
                    *a = (1.0 - eta) * f + eta * *a;
                }
            };
            blend(&mut self.mu_bar, &mu);
            blend(&mut self.sigma_bar, &sigma);
        } else {
            self.mu_bar = mu;
            self.sigma_bar = sigma;
            self.initialized = true;
        }
        self.round_of_last_update = round;
        Ok(())
    }
}

/// One momentum step with `eta = emd_factor(round, eta0)`.
pub fn emd_update(
    state: &MomentumStats,
    stats: &ChannelStats,
    round: u32,
    eta0: f64,
) -> Result<MomentumStats, VfdaError> {
    let mut next = state.clone();
    next.update_with_factor(stats, emd_factor(round, eta0), round)?;
    Ok(next)
}
