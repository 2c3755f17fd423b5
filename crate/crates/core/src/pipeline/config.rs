use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetConfig;
use crate::gtformer::ModelConfig;
use crate::losses::{GuidedMapLoss, LossWeights};
use crate::mask_matching::DEFAULT_MAP_THRESHOLD;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            warmup_steps: 0,
            min_lr: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `step` out of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total_steps.saturating_sub(self.warmup_steps).max(1);
                let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each class held out of training for checkpoint
    /// selection; 0 disables validation and keeps the last epoch.
    pub val_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Weights inside the edge/region terms.
    pub map_loss: GuidedMapLoss,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub map_threshold: f32,
    /// Optional pretrained DeiT weights (safetensors) loaded before training.
    pub init_weights: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            map_loss: GuidedMapLoss::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            dataset: DatasetConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
            map_threshold: DEFAULT_MAP_THRESHOLD,
            init_weights: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.map_loss.validate()?;
        self.optimizer.validate()?;
        self.dataset.preprocess.validate()?;
        if self.dataset.preprocess.crop != self.model.image_size {
            return Err(Error::Config(format!(
                "crop size {} differs from model image size {}",
                self.dataset.preprocess.crop, self.model.image_size
            )));
        }
        if self.schedule.epochs == 0 || self.schedule.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.schedule.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.map_threshold) {
            return Err(Error::Config("map_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(&Sha256::digest(&json)[..8]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_defaults() {
        let o = OptimizerConfig::default();
        assert_eq!((o.beta1, o.beta2, o.eps, o.weight_decay), (0.9, 0.99, 1e-8, 5e-4));
    }

    #[test]
    fn cosine_endpoints() {
        let o = OptimizerConfig {
            lr: 1.0,
            min_lr: 0.1,
            ..Default::default()
        };
        assert_eq!(o.lr_at(0, 10), 1.0);
        assert!((o.lr_at(5, 10) - 0.55).abs() < 1e-12);
        assert!((o.lr_at(10, 10) - 0.1).abs() < 1e-12);
        let w = OptimizerConfig {
            lr: 1.0,
            warmup_steps: 4,
            schedule: LrSchedule::Constant,
            ..Default::default()
        };
        assert_eq!(w.lr_at(0, 10), 0.25);
        assert_eq!(w.lr_at(3, 10), 1.0);
    }

    #[test]
    fn config_json_round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_ne!(partial.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }
}
