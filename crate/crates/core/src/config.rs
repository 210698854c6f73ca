//! Run configuration: a TOML file with documented defaults.
//!
//! Only `[strategy]` (with `kind`) and `[dataset]` (with `kind`) are required.
//! Unknown keys are rejected. See the repository README for the full grammar.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::StrategyConfig;
use crate::data::PartitionScheme;
use crate::error::{ConfigError, Error, Result};
use crate::model::{LocalTrainSpec, ModelArch};
use crate::sim::{ClientProtocol, SeedStreams, SimSettings, SpeedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        /// Training samples per class.
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        /// Held-out samples per class, drawn before partitioning.
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Explicit per-stream seeds; any stream left out is derived from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<u64>,
}

impl SeedOverrides {
    fn is_empty(&self) -> bool {
        *self == SeedOverrides::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    /// `K`, the number of uploads per aggregation.
    #[serde(default = "defaults::buffer_size")]
    pub buffer_size: usize,
    /// `M`, local SGD steps per job.
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,
    #[serde(default = "defaults::local_lr")]
    pub local_lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_rounds")]
    pub max_rounds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sim_time: Option<f64>,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub protocol: ClientProtocol,
    /// Defaults to `[dim, 32, classes]` for synthetic data and `[784, 64, 10]` for IDX.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_dims: Option<ModelArch>,
    /// Replicate seed; the four random streams are derived from it.
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "SeedOverrides::is_empty")]
    pub seeds: SeedOverrides,
    pub strategy: StrategyConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionScheme,
    #[serde(default)]
    pub speed: SpeedModel,
}

mod defaults {
    pub fn classes() -> usize {
        10
    }
    pub fn dim() -> usize {
        16
    }
    pub fn per_class() -> usize {
        4500
    }
    pub fn test_per_class() -> usize {
        1000
    }
    pub fn spread() -> f64 {
        0.35
    }
    pub fn clients() -> usize {
        30
    }
    pub fn buffer_size() -> usize {
        10
    }
    pub fn local_steps() -> usize {
        10
    }
    pub fn local_lr() -> f64 {
        0.05
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn max_rounds() -> u64 {
        300
    }
    pub fn eval_every() -> u64 {
        1
    }
    pub fn seed() -> u64 {
        1
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    ConfigError::Validation {
        field,
        reason: reason.into(),
    }
    .into()
}

impl RunConfig {
    /// Parses and validates a TOML config.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| ConfigError::Parse(format!("config is not UTF-8: {e}")))?;
        Self::parse(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive_f = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be a positive finite number, got {v}")))
            }
        };
        if self.clients == 0 {
            return Err(invalid("clients", "must be positive"));
        }
        if self.buffer_size == 0 || self.buffer_size > self.clients {
            return Err(invalid(
                "buffer_size",
                format!(
                    "K = {} must lie in 1..={} (the client count)",
                    self.buffer_size, self.clients
                ),
            ));
        }
        if self.local_steps == 0 {
            return Err(invalid("local_steps", "must be positive"));
        }
        positive_f("local_lr", self.local_lr)?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be positive"));
        }
        if let Some(t) = self.max_sim_time {
            positive_f("max_sim_time", t)?;
        }
        self.strategy.validate().map_err(|(f, r)| invalid(f, r))?;
        self.speed.validate().map_err(|(f, r)| invalid(f, r))?;
        if self.strategy.kind == crate::aggregation::StrategyKind::FedavgSync
            && self.protocol != ClientProtocol::WaitForAggregation
        {
            return Err(invalid(
                "protocol",
                "synchronous FedAvg requires wait_for_aggregation",
            ));
        }

        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                per_class,
                test_per_class,
                spread,
            } => {
                if *classes < 2 {
                    return Err(invalid("dataset.classes", "need at least 2 classes"));
                }
                if *dim < 2 {
                    return Err(invalid("dataset.dim", "need at least 2 features"));
                }
                if *per_class == 0 {
                    return Err(invalid("dataset.per_class", "must be positive"));
                }
                if *test_per_class == 0 {
                    return Err(invalid("dataset.test_per_class", "must be positive"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(invalid("dataset.spread", "must be finite and non-negative"));
                }
                if classes * per_class < self.clients {
                    return Err(invalid(
                        "clients",
                        format!("{} training samples cannot cover {} clients", classes * per_class, self.clients),
                    ));
                }
            }
            DatasetSpec::Idx { .. } => {}
        }

        match self.partition {
            PartitionScheme::Iid => {}
            PartitionScheme::LabelShard { shards_per_client } => {
                if shards_per_client == 0 {
                    return Err(invalid("partition.shards_per_client", "must be positive"));
                }
            }
            PartitionScheme::Dirichlet { alpha } => positive_f("partition.alpha", alpha)?,
        }

        let arch = self.arch();
        if let Some((dim, classes)) = self.dataset_shape() {
            if arch.input_dim() != dim {
                return Err(invalid(
                    "layer_dims",
                    format!("input width {} does not match feature dim {dim}", arch.input_dim()),
                ));
            }
            if arch.class_count() != classes {
                return Err(invalid(
                    "layer_dims",
                    format!("output width {} does not match {classes} classes", arch.class_count()),
                ));
            }
        }
        Ok(())
    }

    /// `(feature dim, classes)` where known without reading files.
    fn dataset_shape(&self) -> Option<(usize, usize)> {
        match self.dataset {
            DatasetSpec::Synthetic { classes, dim, .. } => Some((dim, classes)),
            DatasetSpec::Idx { .. } => None,
        }
    }

    pub fn arch(&self) -> ModelArch {
        if let Some(arch) = &self.layer_dims {
            return arch.clone();
        }
        let dims = match self.dataset {
            DatasetSpec::Synthetic { classes, dim, .. } => vec![dim, 32, classes],
            DatasetSpec::Idx { .. } => vec![784, 64, 10],
        };
        ModelArch::new(dims).expect("default architectures are valid")
    }

    pub fn seed_streams(&self) -> SeedStreams {
        let derived = SeedStreams::derive(self.seed);
        SeedStreams {
            model: self.seeds.model.unwrap_or(derived.model),
            data: self.seeds.data.unwrap_or(derived.data),
            speed: self.seeds.speed.unwrap_or(derived.speed),
            sampling: self.seeds.sampling.unwrap_or(derived.sampling),
        }
    }

    pub fn sim_settings(&self) -> SimSettings {
        SimSettings {
            arch: self.arch(),
            local: LocalTrainSpec {
                steps: self.local_steps,
                lr: self.local_lr,
                batch_size: self.batch_size,
            },
            strategy: self.strategy,
            buffer_size: self.buffer_size,
            speed: self.speed,
            protocol: self.protocol,
            max_rounds: self.max_rounds,
            max_sim_time: self.max_sim_time,
            eval_every: self.eval_every,
            seeds: self.seed_streams(),
        }
    }
}
