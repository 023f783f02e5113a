//! Training configuration, loadable from TOML.
//!
//! ```toml
//! seed = 0
//! epochs = 30
//! batch_size = 16
//! learning_rate = 1e-4
//! prompt_policy = "per_sample"
//! checkpoint_dir = "runs/synth"
//!
//! [loss]
//! lambda3 = 0.1
//!
//! [clip]
//! backend = "stub"
//! image_ratio = 0.6
//!
//! [data]
//! format = "synth"
//! synth_count = 500
//! val_count = 100
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clip::ClipConfig;
use crate::data::{DatasetFormat, Split, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ArchConfig;

use super::optim::AdamConfig;

/// How often a new prompt is drawn for the text half of the fused feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptPolicy {
    #[default]
    PerSample,
    PerBatch,
    PerEpoch,
}

/// Named defaults for the fusion ratio and loss weights per target dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetProfile {
    Stb,
    Rhd,
}

impl FromStr for TargetProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stb" => Ok(Self::Stb),
            "rhd" => Ok(Self::Rhd),
            other => Err(Error::InvalidConfig(format!("unknown target profile '{other}' (expected stb or rhd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub format: DatasetFormat,
    /// Dataset root, or a manifest file for the synthetic format. Without a
    /// path the synthetic format generates `synth_count` samples in memory.
    pub path: Option<PathBuf>,
    pub split: Split,
    pub synth_count: usize,
    pub synth_seed: u64,
    /// Samples held out for validation (taken from the end of a seeded
    /// permutation).
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DatasetFormat::Synth,
            path: None,
            split: Split::Train,
            synth_count: 500,
            synth_seed: 0,
            val_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub prompt_policy: PromptPolicy,
    pub heatmap_sigma: f64,
    /// Samples per gradient-accumulation chunk; chunks run in parallel and
    /// are summed in a fixed order.
    pub grad_chunk: usize,
    /// Where per-epoch checkpoints, the best checkpoint and the loss log go.
    pub checkpoint_dir: PathBuf,
    /// Stop after this many optimizer steps (for smoke runs).
    pub max_steps: Option<usize>,
    pub target_profile: Option<TargetProfile>,
    pub loss: LossConfig,
    pub clip: ClipConfig,
    pub arch: ArchConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            prompt_policy: PromptPolicy::PerSample,
            heatmap_sigma: DEFAULT_SIGMA,
            grad_chunk: 4,
            checkpoint_dir: PathBuf::from("runs/default"),
            max_steps: None,
            target_profile: None,
            loss: LossConfig::default(),
            clip: ClipConfig::default(),
            arch: ArchConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = match cfg.target_profile {
            Some(p) => cfg.with_profile(p),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a target profile's fusion ratio and loss weights.
    pub fn with_profile(mut self, profile: TargetProfile) -> Self {
        self.clip.image_ratio = match profile {
            TargetProfile::Stb => 0.6,
            TargetProfile::Rhd => 0.9,
        };
        self.loss.lambda1 = 1.0;
        self.loss.lambda2 = 1.0;
        self.loss.lambda3 = 0.1;
        self.target_profile = Some(profile);
        self
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_betas.0, beta2: self.adam_betas.1, eps: self.adam_eps }
    }

    /// Whether the contrastive branch is active.
    pub fn uses_branch2(&self) -> bool {
        self.arch.branch2 && self.loss.lambda3 > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.loss.weights().validate()?;
        self.clip.fusion().validate()?;
        self.arch.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.loss.lambda3 > 0.0 && self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2 when lambda3 > 0".into()));
        }
        if self.loss.lambda3 > 0.0 && !self.arch.branch2 {
            return Err(Error::InvalidConfig("lambda3 > 0 needs arch.branch2 = true".into()));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(Error::InvalidConfig("heatmap_sigma must be positive".into()));
        }
        if self.grad_chunk == 0 {
            return Err(Error::InvalidConfig("grad_chunk must be at least 1".into()));
        }
        if !(self.loss.margin >= 0.0 && self.loss.margin.is_finite()) {
            return Err(Error::InvalidConfig("margin must be finite and non-negative".into()));
        }
        Ok(())
    }
}
