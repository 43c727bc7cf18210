//! Run configuration: one JSON document fixes everything a federation needs
//! to be reproducible: sizes, fusion, precision, trust thresholds, privacy
//! budget, data source, and seeds. The file is persisted next to run outputs
//! so any result can be regenerated.

use crate::encoding::{EncodingConfig, FusionMode};
use crate::fl::dp::DpConfig;
use crate::fl::trainer::Hyperparams;
use crate::group::{GroupParams, MIN_SECURE_BITS};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Sim,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Seeded Gaussian class blobs, the built-in desk-scale task.
    Synthetic {
        classes: usize,
        features: usize,
        samples_per_party: usize,
        eval_samples: usize,
        noise_std: f64,
    },
    /// Headerless CSVs, last column the integer label: one per party plus a
    /// shared evaluation set.
    Csv {
        train: Vec<PathBuf>,
        eval: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: 3,
            features: 4,
            samples_per_party: 60,
            eval_samples: 300,
            noise_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustSettings {
    /// One local threshold per party; a single entry is broadcast to all.
    pub local_thresholds: Vec<u32>,
    pub min_batch_size: u32,
}

impl Default for TrustSettings {
    fn default() -> Self {
        TrustSettings {
            local_thresholds: vec![3],
            min_batch_size: 2,
        }
    }
}

impl TrustSettings {
    pub fn expand(&self, parties: usize) -> Vec<u32> {
        if self.local_thresholds.len() == 1 {
            vec![self.local_thresholds[0]; parties]
        } else {
            self.local_thresholds.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSettings {
    /// Security parameter in bits. Values below 2048 are only usable with
    /// the explicit insecure opt-in, for tests and simulations.
    pub lambda: u32,
    pub seed: u64,
    #[serde(default)]
    pub allow_insecure: bool,
}

impl Default for GroupSettings {
    fn default() -> Self {
        GroupSettings {
            lambda: 64,
            seed: 1,
            allow_insecure: false,
        }
    }
}

impl GroupSettings {
    pub fn build(&self) -> std::result::Result<GroupParams, crate::group::GroupError> {
        if self.lambda >= MIN_SECURE_BITS {
            GroupParams::generate(self.lambda, Some(self.seed))
        } else if self.allow_insecure {
            GroupParams::generate_insecure(self.lambda, Some(self.seed))
        } else {
            Err(crate::group::GroupError::InsecureBitLength {
                lambda: self.lambda,
            })
        }
    }
}

fn default_rounds() -> usize {
    20
}
fn default_parties() -> usize {
    5
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "RunConfig::default_mode")]
    pub mode: RunMode,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_parties")]
    pub parties: usize,
    #[serde(default = "RunConfig::default_fusion")]
    pub fusion: FusionMode,
    /// Weighted fusion draws per-party base weights from registered sample
    /// counts instead of uniform ones.
    #[serde(default)]
    pub weights_from_samples: bool,
    #[serde(default)]
    pub encoding: EncodingConfig,
    #[serde(default)]
    pub trust: TrustSettings,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default)]
    pub group: GroupSettings,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    fn default_mode() -> RunMode {
        RunMode::Sim
    }

    fn default_fusion() -> FusionMode {
        FusionMode::Average
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(ConfigError::Invalid("rounds must be at least 1".into()));
        }
        if self.parties < 2 {
            return Err(ConfigError::Invalid("need at least two parties".into()));
        }
        let locals = self.trust.expand(self.parties);
        if locals.len() != self.parties {
            return Err(ConfigError::Invalid(format!(
                "{} local thresholds for {} parties",
                locals.len(),
                self.parties
            )));
        }
        let t_g = locals.iter().copied().max().unwrap_or(0);
        if t_g < 2 || (t_g as usize) > self.parties {
            return Err(ConfigError::Invalid(format!(
                "global threshold {t_g} infeasible for {} parties",
                self.parties
            )));
        }
        if self.trust.min_batch_size < 2 || (self.trust.min_batch_size as usize) > self.parties {
            return Err(ConfigError::Invalid(format!(
                "batch size {} infeasible for {} parties",
                self.trust.min_batch_size, self.parties
            )));
        }
        if self.encoding.precision == 0 || self.encoding.precision > 9 {
            return Err(ConfigError::Invalid(
                "precision must lie in 1..=9".into(),
            ));
        }
        if self.encoding.clip_bound <= 0.0 {
            return Err(ConfigError::Invalid("clip bound must be positive".into()));
        }
        self.dp
            .validate()
            .map_err(ConfigError::Invalid)?;
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                features,
                samples_per_party,
                eval_samples,
                noise_std,
            } => {
                if *classes < 2 || *features < 2 || *samples_per_party == 0 || *eval_samples == 0 {
                    return Err(ConfigError::Invalid(
                        "synthetic dataset needs >= 2 classes, >= 2 features, nonzero samples"
                            .into(),
                    ));
                }
                if *noise_std <= 0.0 {
                    return Err(ConfigError::Invalid("noise std must be positive".into()));
                }
            }
            DatasetSpec::Csv { train, .. } => {
                if train.len() != self.parties {
                    return Err(ConfigError::Invalid(format!(
                        "{} training CSVs for {} parties",
                        train.len(),
                        self.parties
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.rounds, 20);
        assert_eq!(cfg.parties, 5);
        assert_eq!(cfg.encoding.precision, 4);
        assert_eq!(cfg.hyper.learning_rate, 0.01);
        assert_eq!(cfg.hyper.local_epochs, 3);
        assert_eq!(cfg.trust.expand(5), vec![3; 5]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"rounds": 3, "seed": 7}"#).unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.parties, 5);
    }

    #[test]
    fn infeasible_thresholds_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.trust.local_thresholds = vec![9];
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }

    #[test]
    fn group_settings_gate_insecure_sizes() {
        let small = GroupSettings {
            lambda: 64,
            seed: 1,
            allow_insecure: false,
        };
        assert!(small.build().is_err());
        let allowed = GroupSettings {
            allow_insecure: true,
            ..small
        };
        assert_eq!(allowed.build().unwrap().lambda, 64);
    }

    #[test]
    fn csv_spec_requires_one_path_per_party() {
        let cfg = RunConfig {
            dataset: DatasetSpec::Csv {
                train: vec![PathBuf::from("a.csv")],
                eval: PathBuf::from("eval.csv"),
            },
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
