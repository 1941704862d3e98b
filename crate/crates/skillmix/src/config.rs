//! Run configuration: one TOML file, every key optional, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skillmix_core::corpus::WorldSizes;
use skillmix_core::seq2seq::OptionScoring;
use skillmix_core::train::{Ablations, AdamConfig, FreezeMask, RoutingTarget};
use skillmix_core::ModelConfig;

use crate::error::{AppError, AppResult};
use crate::io::read_to_string;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Pretraining instances per skill.
    pub per_skill: usize,
    /// Held-out pretraining instances per skill.
    pub held_out_per_skill: usize,
    /// Training instances per downstream task.
    pub downstream_train: usize,
    pub downstream_test: usize,
    /// Size of the few-shot training split.
    pub few_shot: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_skill: 5000,
            held_out_per_skill: 200,
            downstream_train: 2000,
            downstream_test: 300,
            few_shot: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub routing_target: RoutingTarget,
    pub optimizer: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            batch_size: 32,
            lambda: 1.0,
            routing_target: RoutingTarget::Split,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Downstream task name.
    pub task: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train on the few-shot split instead of the full training split.
    pub few_shot: bool,
    pub freeze: FreezeMask,
    pub optimizer: AdamConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            task: "hop2_qa".into(),
            epochs: 10,
            batch_size: 32,
            few_shot: false,
            freeze: FreezeMask::default(),
            optimizer: AdamConfig::adapt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scoring: OptionScoring,
    pub max_new_tokens: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scoring: OptionScoring::Sum,
            max_new_tokens: 8,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// `vocab_size` is overwritten from the dataset vocabulary.
    pub model: ModelConfig,
    pub world: WorldSizes,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub ablations: Ablations,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelConfig::tiny(),
            world: WorldSizes::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> AppResult<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<RunConfig> {
        RunConfig::from_toml(&read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> AppResult<()> {
        self.ablations.validate(&self.model)?;
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = skillmix_core::corpus::vocab::NUM_SPECIALS + 1;
        }
        m.validate()?;
        for (name, b) in [
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("adapt.batch_size", self.adapt.batch_size),
            ("eval.batch_size", self.eval.batch_size),
            ("eval.max_new_tokens", self.eval.max_new_tokens),
        ] {
            if b == 0 {
                return Err(AppError::Usage(format!("{name} must be positive")));
            }
        }
        if !(self.pretrain.lambda.is_finite() && self.pretrain.lambda >= 0.0) {
            return Err(AppError::Usage("pretrain.lambda must be finite and non-negative".into()));
        }
        skillmix_core::corpus::DownstreamTask::parse(&self.adapt.task)?;
        Ok(())
    }
}
