use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment_rng, preprocess, Example, ImageTensor, PreprocessMode};
use crate::eval_metrics::{gt_known, topk_loc};
use crate::gtformer::{load_checkpoint, save_checkpoint, GtFormer};
use crate::io::{append_jsonl, write_json};
use crate::losses::{total_loss, EdgeGuide, GuidedMapLoss, LossBreakdown};
use crate::{Error, Result};

use super::infer::{classification_accuracy, infer, prepare_eval, InferMode, InferOptions};
use super::{worker_pool, AdamW, EpochRow, ExperimentConfig, RunManifest};

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub batch_id: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NanDump {
    epoch: usize,
    step: usize,
    batch_id: usize,
    image_ids: Vec<String>,
    labels: Vec<usize>,
    loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: Vec<StepLog>,
    pub final_train_accuracy: f64,
    pub best_val_top1_loc: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Deterministic per-class hold-out: within each class, every example whose
/// rank `r` satisfies `floor((r+1)·f) > floor(r·f)` goes to validation.
pub fn split_validation(examples: &[Example], fraction: f64) -> (Vec<Example>, Vec<Example>) {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for e in examples {
        let r = seen.entry(e.label).or_insert(0);
        let held = ((*r + 1) as f64 * fraction).floor() > (*r as f64 * fraction).floor();
        *r += 1;
        if held {
            val.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, val)
}

pub struct Trainer {
    config: ExperimentConfig,
    model: GtFormer,
    optimizer: AdamW,
    map_loss: GuidedMapLoss,
    epoch: usize,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, model: GtFormer) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("model does not match the experiment config".into()));
        }
        let optimizer = AdamW::new(config.optimizer.clone());
        Ok(Self {
            map_loss: config.map_loss,
            config,
            model,
            optimizer,
            epoch: 0,
            out_dir: None,
        })
    }

    /// Fresh model from the config seed, optionally warm-started from DeiT
    /// weights.
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        let model = GtFormer::new(config.model.clone(), DType::F32, config.seed)?;
        if let Some(path) = &config.init_weights {
            let loaded = crate::gtformer::load_deit_weights(&model, path)?;
            log::info!("initialized {} tensors from {}", loaded.len(), path.display());
        }
        Self::new(config, model)
    }

    /// Restores model, optimizer moments and epoch counter from a checkpoint
    /// written by [`Trainer::fit`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let config: ExperimentConfig = serde_json::from_str(
            ckpt.extra
                .get("experiment")
                .ok_or_else(|| Error::format("checkpoint", "no experiment config"))?,
        )?;
        let epoch: usize = ckpt
            .extra
            .get("epoch")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("checkpoint", "no epoch counter"))?;
        let mut t = Self::new(config, ckpt.model)?;
        if let Some(state) = ckpt.optimizer {
            t.optimizer = AdamW::with_state(t.config.optimizer.clone(), state);
        }
        t.epoch = epoch;
        Ok(t)
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn model(&self) -> &GtFormer {
        &self.model
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.optimizer.step_count()
    }

    /// Augmented tensors of one batch. The augmentation of example `i` in
    /// epoch `e` depends only on `(seed, e, i)`.
    pub fn augment(&self, examples: &[(usize, &Example)], epoch: usize) -> Result<Vec<ImageTensor>> {
        let pre = &self.config.dataset.preprocess;
        let seed = self.config.seed;
        worker_pool(self.config.workers)?.install(|| {
            examples
                .par_iter()
                .map(|&(i, e)| {
                    let mode = PreprocessMode::Train {
                        seed,
                        index: ((epoch as u64) << 32) | i as u64,
                    };
                    Ok(preprocess(&e.image, &e.gt_boxes, pre, mode)?.tensor)
                })
                .collect()
        })
    }

    /// Loss of a batch without updating anything.
    pub fn evaluate_loss(&self, images: &[ImageTensor], labels: &[usize]) -> Result<LossBreakdown> {
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let output = self.model.forward_images(&refs)?;
        let guide = EdgeGuide::from_images(
            &refs,
            self.config.model.patch_size,
            self.model.dtype(),
            self.model.device(),
        )?;
        Ok(total_loss(&output, labels, &guide, self.config.loss, &self.map_loss)?.breakdown)
    }

    /// One optimization step. A non-finite loss aborts before any update.
    pub fn step(
        &mut self,
        images: &[ImageTensor],
        labels: &[usize],
        lr: f64,
        batch_id: usize,
    ) -> Result<LossBreakdown> {
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let output = self.model.forward_images(&refs)?;
        let guide = EdgeGuide::from_images(
            &refs,
            self.config.model.patch_size,
            self.model.dtype(),
            self.model.device(),
        )?;
        let terms = total_loss(&output, labels, &guide, self.config.loss, &self.map_loss)?;
        if !terms.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.optimizer.step_count(),
                batch_id,
            });
        }
        let grads = terms.total.backward()?;
        self.optimizer.step(self.model.params(), &grads, lr)?;
        Ok(terms.breakdown)
    }

    fn total_steps(&self, n: usize) -> usize {
        self.config.schedule.epochs * n.div_ceil(self.config.schedule.batch_size)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.insert("experiment".into(), serde_json::to_string(&self.config)?);
        extra.insert("epoch".into(), self.epoch.to_string());
        save_checkpoint(path, &self.model, Some(self.optimizer.state()), &extra)
    }

    /// Trains from the current epoch to the configured number of epochs.
    ///
    /// `train` must be the same list across resumes. `val` selects the best
    /// checkpoint by GTFormer-only GT-Known; when empty the last epoch is
    /// also the best.
    pub fn fit(&mut self, train: &[Example], val: &[Example]) -> Result<TrainSummary> {
        self.fit_epochs(train, val, usize::MAX)
    }

    /// Like [`Trainer::fit`] but stops after at most `max_epochs` epochs; the
    /// schedule still spans the configured number of epochs, so a later
    /// [`Trainer::resume`] continues the same run.
    pub fn fit_epochs(
        &mut self,
        train: &[Example],
        val: &[Example],
        max_epochs: usize,
    ) -> Result<TrainSummary> {
        let out = self.out_dir.clone();
        let manifest_path = out.as_ref().map(|d| d.join("manifest.json"));
        let mut manifest = match &manifest_path {
            Some(p) if p.exists() => RunManifest::load(p)?,
            _ => RunManifest::new(&self.config)?,
        };
        if let Some(d) = &out {
            write_json(&d.join("config.json"), &self.config)?;
        }
        let log_path = out.as_ref().map(|d| d.join("train_log.jsonl"));
        let bs = self.config.schedule.batch_size;
        let total_steps = self.total_steps(train.len());
        let val_opts = InferOptions {
            mode: InferMode::GtformerOnly,
            map_threshold: self.config.map_threshold,
            batch_size: bs,
            workers: self.config.workers,
        };
        let mut steps = Vec::new();
        let mut best = manifest.best_val_top1_loc();
        let mut last_ckpt = None;
        let mut best_ckpt = manifest.best_checkpoint.clone();
        let mut final_acc = 0.0;
        let start = self.epoch;

        let end = self.config.schedule.epochs.min(start.saturating_add(max_epochs));
        for epoch in start..end {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut augment_rng(self.config.seed.wrapping_add(1), epoch as u64));
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for (batch_id, chunk) in order.chunks(bs).enumerate() {
                let items: Vec<(usize, &Example)> = chunk.iter().map(|&i| (i, &train[i])).collect();
                let images = self.augment(&items, epoch)?;
                let labels: Vec<usize> = items.iter().map(|(_, e)| e.label).collect();
                let step = self.optimizer.step_count();
                let lr = self.config.optimizer.lr_at(step, total_steps);
                let loss = match self.step(&images, &labels, lr, batch_id) {
                    Err(Error::NonFiniteLoss { .. }) => {
                        let loss = self.evaluate_loss(&images, &labels)?;
                        if let Some(d) = &out {
                            write_json(
                                &d.join("nan_dump.json"),
                                &NanDump {
                                    epoch,
                                    step,
                                    batch_id,
                                    image_ids: items.iter().map(|(_, e)| e.image_id.clone()).collect(),
                                    labels,
                                    loss,
                                },
                            )?;
                        }
                        return Err(Error::NonFiniteLoss { step, batch_id });
                    }
                    other => other?,
                };
                let row = StepLog {
                    epoch,
                    step,
                    batch_id,
                    lr,
                    loss,
                };
                if let Some(p) = &log_path {
                    append_jsonl(p, &row)?;
                }
                epoch_loss += row.loss.total;
                batches += 1;
                steps.push(row);
            }
            self.epoch = epoch + 1;

            let train_eval = prepare_eval(train, &self.config.dataset.preprocess, self.config.workers)?;
            let (imgs, _): (Vec<ImageTensor>, Vec<_>) = train_eval.into_iter().unzip();
            let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
            final_acc = classification_accuracy(&self.model, &imgs, &labels, bs)?;
            let (val_gt_known, val_top1_loc) = if val.is_empty() {
                (None, None)
            } else {
                let preds = infer(
                    &self.model,
                    val,
                    &self.config.dataset.preprocess,
                    |_| Ok(None),
                    &val_opts,
                )?;
                let recs: Vec<_> = preds.into_iter().map(|p| p.record).collect();
                (Some(gt_known(&recs, 0.5)), Some(topk_loc(&recs, 1, 0.5)))
            };
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.1}%"));
            log::info!(
                "epoch {} loss {:.4} train acc {:.1}% val GT-Known {} val Top-1 Loc {}",
                epoch + 1,
                epoch_loss / batches.max(1) as f64,
                final_acc,
                pct(val_gt_known),
                pct(val_top1_loc)
            );

            let improved = match (val_top1_loc, best) {
                (None, _) => true,
                (Some(v), None) => {
                    best = Some(v);
                    true
                }
                // ties go to the later, longer-trained checkpoint
                (Some(v), Some(b)) if v >= b => {
                    best = Some(v);
                    true
                }
                _ => false,
            };
            if let Some(d) = &out {
                let last = d.join("checkpoints/last.safetensors");
                self.save(&last)?;
                last_ckpt = Some(last.clone());
                manifest.record_checkpoint(&last);
                if improved {
                    let b = d.join("checkpoints/best.safetensors");
                    std::fs::copy(&last, &b)?;
                    manifest.record_checkpoint(&b);
                    manifest.best_checkpoint = Some(b.clone());
                    best_ckpt = Some(b);
                }
            }
            manifest.epochs.push(EpochRow {
                epoch: epoch + 1,
                steps: self.optimizer.step_count(),
                mean_loss: epoch_loss / batches.max(1) as f64,
                train_accuracy: final_acc,
                val_gt_known,
                val_top1_loc,
            });
            if let Some(p) = &manifest_path {
                manifest.save(p)?;
            }
        }
        Ok(TrainSummary {
            epochs_run: self.epoch - start,
            steps,
            final_train_accuracy: final_acc,
            best_val_top1_loc: best,
            last_checkpoint: last_ckpt,
            best_checkpoint: best_ckpt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn ex(label: usize, i: usize) -> Example {
        Example {
            image_id: format!("{label}_{i}"),
            image: RgbImage::new(4, 4),
            label,
            gt_boxes: vec![],
        }
    }

    #[test]
    fn validation_split_is_per_class() {
        let all: Vec<Example> = (0..2).flat_map(|c| (0..10).map(move |i| ex(c, i))).collect();
        let (train, val) = split_validation(&all, 0.2);
        assert_eq!(val.len(), 4);
        assert_eq!(train.len(), 16);
        assert_eq!(val.iter().filter(|e| e.label == 0).count(), 2);
        let (train, val) = split_validation(&all, 0.0);
        assert_eq!((train.len(), val.len()), (20, 0));
    }
}
