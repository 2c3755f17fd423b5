//! Frozen segment-anything backend.
//!
//! The image is resized so its long side is 1024, embedded once, and every
//! grid point is decoded as a single positive prompt with multi-mask
//! output. Candidates are filtered by predicted IoU and stability score and
//! de-duplicated with mask-IoU non-maximum suppression, following the
//! usual automatic mask generator recipe.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::segment_anything::sam::{Sam, IMAGE_SIZE};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{BinaryMask, Error, Result};

use super::{GridPoint, MaskProvider, ProviderDescriptor};

/// Low-resolution mask logits are a quarter of the padded input side.
const LOW_RES_SIDE: usize = IMAGE_SIZE / 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamVariant {
    VitB,
    VitL,
    VitH,
    Tiny,
}

impl std::str::FromStr for SamVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit_b" => Ok(Self::VitB),
            "vit_l" => Ok(Self::VitL),
            "vit_h" => Ok(Self::VitH),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::Config(format!("unknown SAM variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamSettings {
    pub variant: SamVariant,
    pub pred_iou_thresh: f32,
    pub stability_score_thresh: f32,
    pub stability_score_offset: f32,
    pub nms_iou_thresh: f32,
}

impl Default for SamSettings {
    fn default() -> Self {
        Self {
            variant: SamVariant::VitH,
            pred_iou_thresh: 0.88,
            stability_score_thresh: 0.95,
            stability_score_offset: 1.0,
            nms_iou_thresh: 0.7,
        }
    }
}

pub struct SamProvider {
    model: Sam,
    settings: SamSettings,
    device: Device,
}

impl std::fmt::Debug for SamProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SamProvider")
            .field("settings", &self.settings)
            .finish()
    }
}

fn build(variant: SamVariant, vb: VarBuilder) -> candle_core::Result<Sam> {
    match variant {
        SamVariant::VitB => Sam::new(768, 12, 12, &[2, 5, 8, 11], vb),
        SamVariant::VitL => Sam::new(1024, 24, 16, &[5, 11, 17, 23], vb),
        SamVariant::VitH => Sam::new(1280, 32, 16, &[7, 15, 23, 31], vb),
        SamVariant::Tiny => Sam::new_tiny(vb),
    }
}

impl SamProvider {
    /// Loads weights from a safetensors file.
    pub fn load(weights: &Path, settings: SamSettings) -> Result<Self> {
        let device = Device::Cpu;
        // SAFETY: the file is mapped read-only and not modified while loaded.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], DType::F32, &device)? };
        Ok(Self {
            model: build(settings.variant, vb)?,
            settings,
            device,
        })
    }

    /// Randomly-initialized weights are useless for segmentation; this is
    /// only for exercising the plumbing.
    pub fn with_zero_weights(settings: SamSettings) -> Result<Self> {
        let device = Device::Cpu;
        let vb = VarBuilder::zeros(DType::F32, &device);
        Ok(Self {
            model: build(settings.variant, vb)?,
            settings,
            device,
        })
    }
}

struct Candidate {
    score: f32,
    mask: BinaryMask,
}

impl MaskProvider for SamProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: "sam".into(),
            version: format!("{:?}", self.settings.variant),
        }
    }

    fn settings(&self) -> serde_json::Value {
        serde_json::to_value(&self.settings).unwrap_or(serde_json::Value::Null)
    }

    fn generate(&self, image_id: &str, image: &RgbImage, points: &[GridPoint]) -> Result<Vec<BinaryMask>> {
        let (w, h) = image.dimensions();
        let (h, w) = (h as usize, w as usize);
        if h == 0 || w == 0 {
            return Err(Error::Provider {
                image_id: image_id.into(),
                msg: "empty image".into(),
            });
        }
        let scale = IMAGE_SIZE as f64 / h.max(w) as f64;
        let rh = ((h as f64 * scale).round() as usize).clamp(1, IMAGE_SIZE);
        let rw = ((w as f64 * scale).round() as usize).clamp(1, IMAGE_SIZE);
        let resized =
            image::imageops::resize(image, rw as u32, rh as u32, image::imageops::FilterType::Triangle);
        let mut chw = vec![0f32; 3 * rh * rw];
        for (x, y, px) in resized.enumerate_pixels() {
            for c in 0..3 {
                chw[(c * rh + y as usize) * rw + x as usize] = px[c] as f32;
            }
        }
        let img = Tensor::from_vec(chw, (3, rh, rw), &self.device)?;
        let embeddings = self.model.embeddings(&img)?;

        let s = &self.settings;
        let mut candidates = Vec::new();
        for p in points {
            let (low_res, iou) =
                self.model
                    .forward_for_embeddings(&embeddings, rh, rw, &[(p.x, p.y, true)], true)?;
            let low_res = low_res.flatten_to(1)?.to_dtype(DType::F32)?;
            let iou = iou.flatten_all()?.to_vec1::<f32>()?;
            for (k, &score) in iou.iter().enumerate() {
                if score < s.pred_iou_thresh {
                    continue;
                }
                let logits = low_res.get(k)?.flatten_all()?.to_vec1::<f32>()?;
                let hi = logits.iter().filter(|&&v| v >= s.stability_score_offset).count();
                let lo = logits.iter().filter(|&&v| v >= -s.stability_score_offset).count();
                if lo == 0 || (hi as f32 / lo as f32) < s.stability_score_thresh {
                    continue;
                }
                // Map every output pixel to the padded 1024 frame, then to the
                // low-resolution logit grid.
                let mask = BinaryMask::from_fn(h, w, |y, x| {
                    let fy = ((y as f64 + 0.5) * rh as f64 / h as f64) as usize;
                    let fx = ((x as f64 + 0.5) * rw as f64 / w as f64) as usize;
                    let ly = (fy * LOW_RES_SIDE / IMAGE_SIZE).min(LOW_RES_SIDE - 1);
                    let lx = (fx * LOW_RES_SIDE / IMAGE_SIZE).min(LOW_RES_SIDE - 1);
                    logits[ly * LOW_RES_SIDE + lx] > 0.0
                });
                if !mask.is_empty() {
                    candidates.push(Candidate { score, mask });
                }
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut kept: Vec<BinaryMask> = Vec::new();
        for c in candidates {
            let duplicate = kept.iter().any(|k| {
                let (inter, union) = k.overlap_counts(&c.mask).unwrap_or((0, 1));
                union > 0 && inter as f32 / union as f32 > s.nms_iou_thresh
            });
            if !duplicate {
                kept.push(c.mask);
            }
        }
        Ok(kept)
    }
}
