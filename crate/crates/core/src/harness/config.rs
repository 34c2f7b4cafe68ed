//! Training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::AugmentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Refine,
    Finetune,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "refine" => Ok(Stage::Refine),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::config(format!("unknown training stage: {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Refine => "refine",
            Stage::Finetune => "finetune",
        }
    }
}

/// Everything one training run needs. Serializable as a single JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Dataset manifest path (absolute, or relative to the config file).
    pub manifest: PathBuf,
    /// Checkpoint carrying the prerequisite stage(s); required for refine
    /// and finetune.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halving_period_epochs: usize,
    pub seed: u64,
    /// Channel multiplier applied to both architectures (1.0 = full size).
    pub arch_scale: f64,
    pub augment_enabled: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Use the fixed random perceptual pyramid in the refine loss.
    pub perceptual_enabled: bool,
    /// Hard cap on optimizer steps (0 = no cap), mainly for smoke tests.
    #[serde(default)]
    pub max_steps: u64,
    /// Write a checkpoint every this many epochs (the final one is always
    /// written).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every_epochs: usize,
}

fn default_checkpoint_every() -> usize {
    5
}

impl TrainConfig {
    /// Stage defaults: coarse trains 10 epochs at batch 16, refine 15 at
    /// batch 8, the end-to-end finetune 2 epochs at learning rate 2e-5;
    /// learning rates start at 1e-4 and halve every 5 epochs.
    pub fn defaults_for(stage: Stage, manifest: PathBuf) -> Self {
        let (epochs, batch_size, learning_rate) = match stage {
            Stage::Coarse => (10, 16, 1e-4),
            Stage::Refine => (15, 8, 1e-4),
            Stage::Finetune => (2, 8, 2e-5),
        };
        Self {
            stage,
            manifest,
            init_from: None,
            epochs,
            batch_size,
            learning_rate,
            lr_halving_period_epochs: 5,
            seed: 0,
            arch_scale: 1.0,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            perceptual_enabled: true,
            max_steps: 0,
            checkpoint_every_epochs: default_checkpoint_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive".to_string()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive".to_string()));
        }
        if self.lr_halving_period_epochs == 0 {
            return Err(Error::config(
                "lr_halving_period_epochs must be positive".to_string(),
            ));
        }
        if self.arch_scale <= 0.0 || self.arch_scale > 1.0 || !self.arch_scale.is_finite() {
            return Err(Error::config("arch_scale must lie in (0, 1]".to_string()));
        }
        match self.stage {
            Stage::Refine | Stage::Finetune => {
                if self.init_from.is_none() {
                    return Err(Error::config(format!(
                        "stage {} needs init_from pointing at the previous checkpoint",
                        self.stage.as_str()
                    )));
                }
            }
            Stage::Coarse => {}
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e.to_string()))?;
        let mut config: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("config parse error in {}: {e}", path.display())))?;
        // Relative paths resolve against the config file.
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if config.manifest.is_relative() {
            config.manifest = base.join(&config.manifest);
        }
        if let Some(init) = &config.init_from {
            if init.is_relative() {
                config.init_from = Some(base.join(init));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("config serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e.to_string()))
    }
}

/// Stepped learning-rate schedule: halved every `halve_every` epochs.
pub fn learning_rate_at(base: f64, halve_every: usize, epoch: usize) -> f64 {
    base * 0.5_f64.powi((epoch / halve_every) as i32)
}
