use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::federation::{FedConfig, FedError};
use crate::segnet::NetworkConfig;
use crate::synthdata::MAX_VOLUME_DIM;

/// Synthetic data generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Edge length `D` of the cubic volumes.
    pub volume_size: usize,
    pub samples_per_client: usize,
    /// 0 gives identical clients, 1 the widest spread of shifts.
    pub heterogeneity: f64,
    /// Size of the global evaluation set drawn from all client shifts.
    pub heldout_samples: usize,
    /// Load shards from a `gen-data` directory instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            volume_size: 16,
            samples_per_client: 8,
            heterogeneity: 0.8,
            heldout_samples: 8,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Number of seeds per variant, starting at the experiment seed.
    pub seeds: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub federation: FedConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            federation: FedConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error at `{key}`: {msg}")]
    Parse { key: String, msg: String },
    #[error("invalid `{key}`: {msg}")]
    Constraint { key: String, msg: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { key, .. } | ConfigError::Constraint { key, .. } => Some(key),
        }
    }
}

fn constraint(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate().map_err(|e| constraint("network", e.to_string()))?;
        if self.network.in_channels != 1 {
            return Err(constraint("network.in_channels", "synthetic volumes have exactly 1 channel"));
        }
        if !(2..=3).contains(&self.network.num_classes) {
            return Err(constraint(
                "network.num_classes",
                format!("must be 2 or 3, got {}", self.network.num_classes),
            ));
        }
        let d = self.data.volume_size;
        let m = self.network.spatial_multiple().max(4);
        if d == 0 || !d.is_multiple_of(m) || d > MAX_VOLUME_DIM as usize {
            return Err(constraint(
                "data.volume_size",
                format!("must be a positive multiple of {m} up to {MAX_VOLUME_DIM}, got {d}"),
            ));
        }
        if self.data.samples_per_client == 0 {
            return Err(constraint("data.samples_per_client", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.data.heterogeneity) {
            return Err(constraint(
                "data.heterogeneity",
                format!("must be in [0, 1], got {}", self.data.heterogeneity),
            ));
        }
        if self.data.heldout_samples == 0 {
            return Err(constraint("data.heldout_samples", "must be at least 1"));
        }
        if self.ablate.seeds == 0 {
            return Err(constraint("ablate.seeds", "must be at least 1"));
        }
        self.federation.validate().map_err(|e| match e {
            FedError::Config { key, msg } => ConfigError::Constraint { key, msg },
            other => constraint("federation", other.to_string()),
        })
    }

    /// Canonical TOML text with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}

/// Parses and validates a TOML document; missing keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let msg = e.into_inner().message().to_string();
        ConfigError::Parse { key, msg }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.federation.lr0, 5e-4);
        assert_eq!(c.federation.eta0, 10.0);
        assert_eq!(c.federation.local_epochs, 1);
        assert_eq!(c.ablate.seeds, 5);
    }

    #[test]
    fn negative_eta0_names_the_key() {
        let e = parse_config_str("[federation]\neta0 = -1.0\n").unwrap_err();
        assert!(matches!(e, ConfigError::Constraint { .. }));
        assert!(e.key().unwrap().contains("eta0"), "{e}");
        assert!(e.to_string().contains("eta0"));
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let e = parse_config_str("[federation]\nlearning_rate = 0.1\n").unwrap_err();
        assert_eq!(e.key(), Some("federation.learning_rate"), "{e}");
        let e = parse_config_str("bogus = 1\n").unwrap_err();
        assert_eq!(e.key(), Some("bogus"), "{e}");
    }

    #[test]
    fn type_error_names_the_key() {
        let e = parse_config_str("[data]\nvolume_size = \"big\"\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { .. }));
        assert_eq!(e.key(), Some("data.volume_size"), "{e}");
    }

    #[test]
    fn constraint_violations() {
        for (doc, key) in [
            ("[data]\nvolume_size = 10\n", "data.volume_size"),
            ("[network]\nnum_classes = 4\n", "network.num_classes"),
            ("[federation]\nnum_clients = 0\n", "federation.num_clients"),
            ("[federation.ablation]\nno_vfda = true\nmixup_baseline = true\n", "ablation.mixup_baseline"),
            ("[ablate]\nseeds = 0\n", "ablate.seeds"),
        ] {
            let e = parse_config_str(doc).unwrap_err();
            assert!(e.key().unwrap().contains(key), "{doc}: {e}");
        }
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let mut c = ExperimentConfig::default();
        c.seed = 42;
        c.federation.lr0 = 0.0123456789;
        c.federation.ablation.no_emd = true;
        c.data.dir = Some("some/data".into());
        c.network.encoder_channels = vec![4, 8];
        for cfg in [ExperimentConfig::default(), c] {
            let text = cfg.to_toml();
            assert_eq!(parse_config_str(&text).unwrap(), cfg, "{text}");
        }
    }
}
