use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, Example, ImageTensor, PreprocessConfig, PreprocessMode};
use crate::eval_metrics::{bbox_from_mask, BBox, PredictionRecord};
use crate::gtformer::GtFormer;
use crate::mask_matching::{fallback_result, select_mask, MatchResult};
use crate::mask_provider::MaskGallery;
use crate::{Error, HeatMap, Result};

use super::worker_pool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferMode {
    /// Match `M_b` against the mask gallery.
    Pro2Sam,
    /// Skip matching; box the binarized map directly.
    GtformerOnly,
}

impl std::str::FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pro2sam" => Ok(Self::Pro2Sam),
            "gtformer-only" | "gtformer" => Ok(Self::GtformerOnly),
            other => Err(Error::Config(format!("unknown inference mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub mode: InferMode,
    pub map_threshold: f32,
    pub batch_size: usize,
    pub workers: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            mode: InferMode::Pro2Sam,
            map_threshold: crate::mask_matching::DEFAULT_MAP_THRESHOLD,
            batch_size: 32,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub record: PredictionRecord,
    pub map: HeatMap,
    pub matched: MatchResult,
    pub logits: Vec<f32>,
}

/// Classes sorted by decreasing logit, ties to the lower index.
pub fn top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Eval-preprocessed tensors and boxes.
pub fn prepare_eval(
    examples: &[Example],
    pre: &PreprocessConfig,
    workers: usize,
) -> Result<Vec<(ImageTensor, Vec<BBox>)>> {
    worker_pool(workers)?.install(|| {
        examples
            .par_iter()
            .map(|e| {
                let p = preprocess(&e.image, &e.gt_boxes, pre, PreprocessMode::Eval)?;
                if p.boxes_clipped {
                    log::debug!("{}: ground-truth box clipped by the crop", e.image_id);
                }
                Ok((p.tensor, p.gt_boxes))
            })
            .collect()
    })
}

/// Logits and fused maps, batch by batch in input order.
pub fn predict(
    model: &GtFormer,
    images: &[ImageTensor],
    batch_size: usize,
) -> Result<Vec<(Vec<f32>, HeatMap)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let o = model.forward_images(&refs)?;
        let logits = o.logits.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
        for (i, l) in logits.into_iter().enumerate() {
            out.push((l, o.maps.fused_map(i)?));
        }
    }
    Ok(out)
}

/// Runs the full localization pipeline. `gallery` looks up the cached
/// gallery of an image id; `Ok(None)` means missing and triggers the
/// fallback.
pub fn infer<G>(
    model: &GtFormer,
    examples: &[Example],
    pre: &PreprocessConfig,
    gallery: G,
    opts: &InferOptions,
) -> Result<Vec<ImagePrediction>>
where
    G: Fn(&str) -> Result<Option<MaskGallery>> + Sync,
{
    let prepared = prepare_eval(examples, pre, opts.workers)?;
    let tensors: Vec<ImageTensor> = prepared.iter().map(|(t, _)| t.clone()).collect();
    let outputs = predict(model, &tensors, opts.batch_size)?;
    let side = pre.crop;
    let k = 5.min(model.config().num_classes);
    worker_pool(opts.workers)?.install(|| {
        examples
            .par_iter()
            .zip(prepared.par_iter())
            .zip(outputs.into_par_iter())
            .map(|((e, (_, boxes)), (logits, map))| {
                let matched = match opts.mode {
                    InferMode::GtformerOnly => {
                        fallback_result(&e.image_id, &map, opts.map_threshold, side, side)
                    }
                    InferMode::Pro2Sam => match gallery(&e.image_id)? {
                        Some(g) => {
                            if g.height != side || g.width != side {
                                return Err(Error::Shape(format!(
                                    "gallery of {} is {}x{}, expected {side}x{side}",
                                    e.image_id, g.height, g.width
                                )));
                            }
                            let r = select_mask(&g, &map, opts.map_threshold)?;
                            if r.fallback_used {
                                log::info!("{}: no gallery mask overlaps M_b, using fallback", e.image_id);
                            }
                            r
                        }
                        None => {
                            log::warn!("{}: gallery missing, using fallback", e.image_id);
                            fallback_result(&e.image_id, &map, opts.map_threshold, side, side)
                        }
                    },
                };
                let record = PredictionRecord {
                    image_id: e.image_id.clone(),
                    predicted_box: bbox_from_mask(&matched.final_mask)?,
                    top5_classes: top_k(&logits, k),
                    gt_boxes: boxes.clone(),
                    gt_class: e.label,
                };
                Ok(ImagePrediction {
                    record,
                    map,
                    matched,
                    logits,
                })
            })
            .collect()
    })
}

/// Fraction (in percent) of examples whose top-1 class is correct.
pub fn classification_accuracy(
    model: &GtFormer,
    images: &[ImageTensor],
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, images, batch_size)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|((l, _), &y)| top_k(l, 1)[0] == y)
        .count();
    Ok(100.0 * hits as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties_low() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5, 0.9], 3), vec![1, 3, 2]);
        assert_eq!(top_k(&[1.0, 2.0], 5), vec![1, 0]);
    }
}
