use serde::{Deserialize, Serialize};

use super::FedError;
use crate::segnet::LossWeights;
use crate::vfda::{VfdaSettings, DEFAULT_ETA0, DEFAULT_MIXUP_ALPHA, EPS_VAR};

/// Switches that turn the full method into one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Upload last-batch statistics instead of momentum-accumulated ones.
    pub no_emd: bool,
    /// Combined variance uses the local variance only.
    pub no_global_variance: bool,
    /// Plain FedAvg, no feature augmentation.
    pub no_vfda: bool,
    /// FedAvg with input-level MixUp instead of feature augmentation.
    pub mixup_baseline: bool,
}

/// The five rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    None,
    MixUp,
    Vfda,
    VfdaNoEmd,
    VfdaNoGlobalVariance,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::None,
        Variant::MixUp,
        Variant::Vfda,
        Variant::VfdaNoEmd,
        Variant::VfdaNoGlobalVariance,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::MixUp => "MixUp",
            Variant::Vfda => "VFDA",
            Variant::VfdaNoEmd => "VFDA w/o EMD",
            Variant::VfdaNoGlobalVariance => "VFDA w/o Global Statistic Variances",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::None => f.no_vfda = true,
            Variant::MixUp => f.mixup_baseline = true,
            Variant::Vfda => {}
            Variant::VfdaNoEmd => f.no_emd = true,
            Variant::VfdaNoGlobalVariance => f.no_global_variance = true,
        }
        f
    }
}

impl AblationFlags {
    /// Whether the feature augmentation layers run at all.
    pub fn vfda_active(&self) -> bool {
        !self.no_vfda && !self.mixup_baseline
    }

    pub fn validate(&self) -> Result<(), FedError> {
        if self.no_vfda && self.mixup_baseline {
            return Err(FedError::Config {
                key: "federation.ablation.mixup_baseline".into(),
                msg: "no_vfda and mixup_baseline both replace VFDA; set at most one".into(),
            });
        }
        if !self.vfda_active() && (self.no_emd || self.no_global_variance) {
            return Err(FedError::Config {
                key: "federation.ablation.no_emd".into(),
                msg: "no_emd and no_global_variance modify VFDA and cannot be combined with no_vfda or mixup_baseline"
                    .into(),
            });
        }
        Ok(())
    }
}

/// Round protocol and local training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: u32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_power: f64,
    pub eta0: f64,
    pub eps_var: f64,
    /// Probability that a VFDA layer augments a given batch.
    pub apply_prob: f64,
    pub mixup_alpha: f64,
    pub loss_weights: LossWeights,
    /// Random axis flips of every training sample.
    pub flip_augment: bool,
    pub ablation: AblationFlags,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 4,
            rounds: 20,
            local_epochs: 1,
            batch_size: 2,
            lr0: 5e-4,
            lr_decay_power: 0.9,
            eta0: DEFAULT_ETA0,
            eps_var: EPS_VAR,
            apply_prob: 1.0,
            mixup_alpha: DEFAULT_MIXUP_ALPHA,
            loss_weights: LossWeights::default(),
            flip_augment: false,
            ablation: AblationFlags::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |key: &str, msg: String| {
            Err(FedError::Config {
                key: format!("federation.{key}"),
                msg,
            })
        };
        if self.num_clients == 0 {
            return bad("num_clients", "must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad("lr0", format!("must be finite and non-negative, got {}", self.lr0));
        }
        if !(self.lr_decay_power.is_finite() && self.lr_decay_power >= 0.0) {
            return bad("lr_decay_power", format!("must be non-negative, got {}", self.lr_decay_power));
        }
        if !(self.eta0.is_finite() && self.eta0 >= 0.0) {
            return bad("eta0", format!("must be finite and non-negative, got {}", self.eta0));
        }
        if !(self.eps_var.is_finite() && self.eps_var >= 0.0) {
            return bad("eps_var", format!("must be finite and non-negative, got {}", self.eps_var));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return bad("apply_prob", format!("must be in [0, 1], got {}", self.apply_prob));
        }
        if !(self.mixup_alpha.is_finite() && self.mixup_alpha > 0.0) {
            return bad("mixup_alpha", format!("must be positive, got {}", self.mixup_alpha));
        }
        let w = self.loss_weights;
        if !(w.ce.is_finite() && w.dice.is_finite() && w.ce >= 0.0 && w.dice >= 0.0) {
            return bad("loss_weights", format!("weights must be finite and non-negative, got {w:?}"));
        }
        self.ablation.validate()
    }

    /// Learning rate of round `round` (1-based): `lr0 · (1 − (round−1)/R)^power`.
    pub fn learning_rate(&self, round: u32) -> f64 {
        let progress = f64::from(round.saturating_sub(1)) / f64::from(self.rounds);
        self.lr0 * (1.0 - progress).max(0.0).powf(self.lr_decay_power)
    }

    pub fn vfda_settings(&self) -> VfdaSettings {
        VfdaSettings {
            enabled: self.ablation.vfda_active(),
            use_emd: !self.ablation.no_emd,
            use_global_variance: !self.ablation.no_global_variance,
            apply_prob: self.apply_prob,
            eta0: self.eta0,
            eps_var: self.eps_var,
        }
    }
}
