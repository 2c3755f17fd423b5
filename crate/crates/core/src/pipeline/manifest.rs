use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json};
use crate::Result;

use super::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_gt_known: Option<f64>,
    /// Checkpoint selection score.
    #[serde(default)]
    pub val_top1_loc: Option<f64>,
}

/// Append-only record of a training run. Rows and checkpoint paths are only
/// ever added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochRow>,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config_hash: config.hash()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            epochs: Vec::new(),
            checkpoints: Vec::new(),
            best_checkpoint: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn record_checkpoint(&mut self, path: &Path) {
        if !self.checkpoints.iter().any(|p| p == path) {
            self.checkpoints.push(path.to_path_buf());
        }
    }

    pub fn best_val_top1_loc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|r| r.val_top1_loc)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}
