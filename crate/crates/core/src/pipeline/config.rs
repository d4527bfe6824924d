use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::depth::{SamplingBudget, DEFAULT_MAX_RANGE};
use crate::error::{Error, Result};
use crate::mask::Temperature;
use crate::nn::models::CompletionConfig;
use crate::nn::unet::UNetConfig;
use crate::priors::PriorMode;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Weight of the budget term in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights {
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        let w = Self { alpha };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    PretrainCompletion,
    TrainSampler,
    JointFinetune,
    FixedMask,
    #[serde(rename = "prednet")]
    PredNet,
    #[serde(rename = "implicitpred")]
    ImplicitPred,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainCompletion => "pretrain_completion",
            Stage::TrainSampler => "train_sampler",
            Stage::JointFinetune => "joint_finetune",
            Stage::FixedMask => "fixed_mask",
            Stage::PredNet => "prednet",
            Stage::ImplicitPred => "implicitpred",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Stage::PretrainCompletion,
            Stage::TrainSampler,
            Stage::JointFinetune,
            Stage::FixedMask,
            Stage::PredNet,
            Stage::ImplicitPred,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Checkpoints a stage starts from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadFrom {
    pub completion: Option<PathBuf>,
    pub sampler: Option<PathBuf>,
    pub prednet: Option<PathBuf>,
    pub fixed_mask: Option<PathBuf>,
}

/// U-Net depth and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
}

impl NetConfig {
    pub fn unet(&self, in_channels: usize, out_channels: usize) -> UNetConfig {
        UNetConfig::new(self.levels, self.base_channels, in_channels, out_channels)
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sampler: NetConfig,
    pub completion: CompletionConfig,
    pub prednet: NetConfig,
    /// PredNet predicts a correction to the newest past map.
    pub prednet_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sampler: NetConfig::default(),
            completion: CompletionConfig {
                levels: 4,
                base_channels: 16,
            },
            prednet: NetConfig::default(),
            prednet_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.unet(1, 2).validate()?;
        self.completion.unet().validate()?;
        self.prednet.unet(1, 1).validate()
    }
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of the completion network when it trains alongside a
    /// sampler or mask; `None` uses `learning_rate`.
    pub completion_learning_rate: Option<f64>,
    pub alpha: LossWeights,
    pub budget: SamplingBudget,
    pub prior_mode: PriorMode,
    pub seed: u64,
    pub load_from: LoadFrom,
    /// Sharpness of the soft argmax.
    pub temperature: Temperature,
    /// Depth mapped to 1.0 before entering any network.
    pub max_range: f64,
    /// Past reconstructions fed to PredNet or the implicit sampler; 0 picks
    /// the prior mode's default.
    pub memory_size: usize,
    /// Weight of the sampled-maps term in implicit mode.
    pub sampled_maps_weight: f64,
    /// Update the completion network too (fixed mask and adaptive stages).
    pub joint_completion: bool,
    /// Fraction of valid ground truth sampled when building pseudo ground truth.
    pub pseudo_gt_fraction: f64,
    pub models: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            stage: Stage::default(),
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            completion_learning_rate: None,
            alpha: LossWeights::default(),
            budget: SamplingBudget::new(410).expect("positive budget"),
            prior_mode: PriorMode::LowerBound,
            seed: 0,
            load_from: LoadFrom::default(),
            temperature: Temperature::default(),
            max_range: DEFAULT_MAX_RANGE,
            memory_size: 0,
            sampled_maps_weight: 1.0,
            joint_completion: false,
            pseudo_gt_fraction: 0.2,
            models: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for a stage.
    pub fn for_stage(stage: Stage) -> Self {
        let base = Self {
            stage,
            ..Self::default()
        };
        match stage {
            Stage::PretrainCompletion => Self {
                epochs: 10,
                learning_rate: 2e-3,
                ..base
            },
            Stage::TrainSampler => Self {
                epochs: 8,
                learning_rate: 1e-3,
                alpha: LossWeights { alpha: 4.0 },
                ..base
            },
            Stage::JointFinetune => Self {
                epochs: 3,
                learning_rate: 3e-4,
                alpha: LossWeights { alpha: 50.0 },
                joint_completion: true,
                ..base
            },
            Stage::FixedMask => Self {
                epochs: 4,
                batch_size: 1,
                learning_rate: 5e-2,
                completion_learning_rate: Some(3e-4),
                alpha: LossWeights { alpha: 20.0 },
                prior_mode: PriorMode::None,
                ..base
            },
            Stage::PredNet => Self {
                epochs: 10,
                learning_rate: 1e-3,
                prior_mode: PriorMode::PredNet,
                ..base
            },
            Stage::ImplicitPred => Self {
                epochs: 6,
                learning_rate: 1e-3,
                alpha: LossWeights { alpha: 20.0 },
                prior_mode: PriorMode::Implicit,
                ..base
            },
        }
    }

    pub fn completion_lr(&self) -> f64 {
        self.completion_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn memory(&self) -> usize {
        if self.memory_size == 0 {
            self.prior_mode.default_memory()
        } else {
            self.memory_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unknown config schema_version {}",
                self.schema_version
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(lr) = self.completion_learning_rate {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("completion_learning_rate must be > 0, got {lr}")));
            }
        }
        self.alpha.validate()?;
        if !(self.max_range > 0.0) {
            return Err(Error::Config(format!("max_range must be > 0, got {}", self.max_range)));
        }
        if !(self.sampled_maps_weight >= 0.0) {
            return Err(Error::Config("sampled_maps_weight must be >= 0".into()));
        }
        if !(self.pseudo_gt_fraction > 0.0 && self.pseudo_gt_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "pseudo_gt_fraction must lie in (0, 1], got {}",
                self.pseudo_gt_fraction
            )));
        }
        self.models.validate()
    }
}

/// Settings of the online loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct E2EConfig {
    pub schema_version: u32,
    /// Warm-up frames sampled at random before the adaptive branch starts.
    pub memory_size: usize,
    /// PredNet input depth; `None` means equal to `memory_size`.
    pub history: Option<usize>,
    pub budget: SamplingBudget,
    pub prior_mode: PriorMode,
    pub prednet: Option<PathBuf>,
    pub sampler: Option<PathBuf>,
    pub completion: Option<PathBuf>,
    pub seed: u64,
    pub temperature: Temperature,
    pub max_range: f64,
}

impl Default for E2EConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            memory_size: 4,
            history: None,
            budget: SamplingBudget::new(410).expect("positive budget"),
            prior_mode: PriorMode::PredNet,
            prednet: None,
            sampler: None,
            completion: None,
            seed: 0,
            temperature: Temperature::default(),
            max_range: DEFAULT_MAX_RANGE,
        }
    }
}

impl E2EConfig {
    /// Depth of the prior stack.
    pub fn history_len(&self) -> usize {
        self.history.unwrap_or(self.memory_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unknown config schema_version {}",
                self.schema_version
            )));
        }
        if self.memory_size == 0 {
            return Err(Error::Config("memory_size must be >= 1".into()));
        }
        if self.history == Some(0) {
            return Err(Error::Config("history must be >= 1".into()));
        }
        if !matches!(self.prior_mode, PriorMode::PredNet | PriorMode::Implicit) {
            return Err(Error::Config(format!(
                "the online loop needs prior_mode prednet or implicit, got {}",
                self.prior_mode
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config(format!("max_range must be > 0, got {}", self.max_range)));
        }
        Ok(())
    }

    /// Fails with a configuration error naming the first missing checkpoint.
    pub fn require_checkpoints(&self) -> Result<()> {
        let mut needed = vec![("completion", &self.completion), ("sampler", &self.sampler)];
        if self.prior_mode == PriorMode::PredNet {
            needed.insert(0, ("prednet", &self.prednet));
        }
        for (name, path) in needed {
            if path.is_none() {
                return Err(Error::Config(format!("missing checkpoint field `{name}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { alpha: LossWeights { alpha: -1.0 }, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert_eq!(TrainConfig::for_stage(Stage::FixedMask).batch_size, 1);
        assert_eq!(TrainConfig::for_stage(Stage::PredNet).memory(), 4);
        assert_eq!(TrainConfig::for_stage(Stage::ImplicitPred).memory(), 2);
    }

    #[test]
    fn serde_names() {
        let cfg = TrainConfig::for_stage(Stage::ImplicitPred);
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["stage"], "implicitpred");
        assert_eq!(json["prior_mode"], "implicit");
        assert_eq!(json["alpha"], 20.0);
        let back: TrainConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn e2e_missing_checkpoint_is_named() {
        let cfg = E2EConfig::default();
        let err = cfg.require_checkpoints().unwrap_err();
        assert!(err.to_string().contains("prednet"), "{err}");
        assert_eq!(cfg.history_len(), 4);
    }
}
