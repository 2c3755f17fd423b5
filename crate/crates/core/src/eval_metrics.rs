//! WSOL metrics: box extraction, GT-Known, Top-k Loc and MaxBoxAccV2.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::{BinaryMask, Error, HeatMap, Result};

/// IoU thresholds reported in [`EvalReport::box_acc`].
pub const BOX_ACC_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
/// Thresholds averaged into [`EvalReport::mean_box_acc`].
pub const MEAN_BOX_ACC_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
pub const DEFAULT_TAU_STEPS: usize = 100;

/// Axis-aligned box in pixels, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.is_valid() {
            return Err(Error::Input(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Intersection with `[0,width) × [0,height)`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Tight box of the largest 4-connected component; the first component in
/// raster order wins ties.
pub fn bbox_from_mask(mask: &BinaryMask) -> Result<BBox> {
    let (h, w) = mask.shape();
    let mut label = vec![false; h * w];
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if label[start] || !mask.bits()[start] {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let mut size = 0usize;
        let mut b = [usize::MAX, usize::MAX, 0, 0];
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            size += 1;
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x + 1);
            b[3] = b[3].max(y + 1);
            let mut visit = |q: usize| {
                if !label[q] && mask.bits()[q] {
                    label[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, b));
        }
    }
    let (_, b) = best.ok_or_else(|| Error::Input("cannot extract a box from an empty mask".into()))?;
    Ok(BBox {
        x_min: b[0] as f64,
        y_min: b[1] as f64,
        x_max: b[2] as f64,
        y_max: b[3] as f64,
    })
}

/// Upsamples `map` to `(height, width)` bilinearly, keeps pixels at or above
/// `tau · max`, and boxes the largest component.
pub fn bbox_from_map(map: &HeatMap, tau: f64, height: usize, width: usize) -> Result<BBox> {
    let up = map.resize_bilinear(height, width);
    bbox_from_upsampled(&up, tau)
}

fn bbox_from_upsampled(up: &HeatMap, tau: f64) -> Result<BBox> {
    let cut = (tau * up.max() as f64) as f32;
    let mut mask = up.threshold(cut);
    if mask.is_empty() {
        mask = up.threshold(up.max());
    }
    bbox_from_mask(&mask)
}

/// The sweep thresholds `(j + 0.5) / steps`, all strictly inside (0, 1).
pub fn tau_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|j| (j as f64 + 0.5) / steps as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub predicted_box: BBox,
    pub top5_classes: Vec<usize>,
    pub gt_boxes: Vec<BBox>,
    pub gt_class: usize,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.gt_boxes.is_empty() {
            return Err(Error::Input(format!("{}: no ground-truth boxes", self.image_id)));
        }
        if self.top5_classes.is_empty() {
            return Err(Error::Input(format!("{}: no class predictions", self.image_id)));
        }
        for (i, c) in self.top5_classes.iter().enumerate() {
            if self.top5_classes[..i].contains(c) {
                return Err(Error::Input(format!(
                    "{}: duplicate class {c} in top-5",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn best_iou(&self) -> f64 {
        self.gt_boxes
            .iter()
            .map(|g| box_iou(&self.predicted_box, g))
            .fold(0.0, f64::max)
    }

    pub fn loc_correct(&self, delta: f64) -> bool {
        self.best_iou() >= delta
    }

    pub fn class_in_topk(&self, k: usize) -> bool {
        self.top5_classes.iter().take(k).any(|&c| c == self.gt_class)
    }
}

fn percentage(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

pub fn gt_known(records: &[PredictionRecord], delta: f64) -> f64 {
    percentage(
        records.iter().filter(|r| r.loc_correct(delta)).count(),
        records.len(),
    )
}

pub fn topk_loc(records: &[PredictionRecord], k: usize, delta: f64) -> f64 {
    percentage(
        records
            .iter()
            .filter(|r| r.class_in_topk(k) && r.loc_correct(delta))
            .count(),
        records.len(),
    )
}

/// Per-image localization output for box-accuracy evaluation.
#[derive(Debug, Clone)]
pub enum Localization {
    /// Continuous map at any resolution; swept over `tau`.
    Map(HeatMap),
    /// Final binary mask at image resolution; a single operating point.
    Mask(BinaryMask),
}

#[derive(Debug, Clone)]
pub struct BoxAccInput {
    pub localization: Localization,
    pub gt_boxes: Vec<BBox>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAccCurve {
    pub delta: f64,
    /// BoxAcc at every sweep threshold (a single entry for masks).
    pub per_tau: Vec<f64>,
    pub max: f64,
}

/// BoxAcc(δ, τ) for every τ of the sweep and its maximum per δ.
///
/// Mixed inputs are allowed: mask entries contribute the same box at every
/// τ.
pub fn max_box_acc_v2(inputs: &[BoxAccInput], deltas: &[f64], tau_steps: usize) -> Result<Vec<BoxAccCurve>> {
    let all_masks = inputs
        .iter()
        .all(|i| matches!(i.localization, Localization::Mask(_)));
    let taus = if all_masks { vec![0.5] } else { tau_grid(tau_steps) };
    // best IoU per (image, tau)
    let mut ious = Vec::with_capacity(inputs.len());
    for input in inputs {
        if input.gt_boxes.is_empty() {
            return Err(Error::Input("box accuracy needs ground-truth boxes".into()));
        }
        let best = |b: &BBox| input.gt_boxes.iter().map(|g| box_iou(b, g)).fold(0.0, f64::max);
        let row: Vec<f64> = match &input.localization {
            Localization::Mask(m) => {
                let v = best(&bbox_from_mask(m)?);
                vec![v; taus.len()]
            }
            Localization::Map(map) => {
                let up = map.resize_bilinear(input.height, input.width);
                taus.iter()
                    .map(|&t| bbox_from_upsampled(&up, t).map(|b| best(&b)))
                    .collect::<Result<_>>()?
            }
        };
        ious.push(row);
    }
    Ok(deltas
        .iter()
        .map(|&delta| {
            let per_tau: Vec<f64> = (0..taus.len())
                .map(|t| percentage(ious.iter().filter(|row| row[t] >= delta).count(), ious.len()))
                .collect();
            let max = per_tau.iter().cloned().fold(0.0, f64::max);
            BoxAccCurve { delta, per_tau, max }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub gt_known: f64,
    pub top1_loc: f64,
    pub top5_loc: f64,
    /// Keys are the IoU thresholds formatted with two decimals.
    pub box_acc: BTreeMap<String, f64>,
    pub mean_box_acc: f64,
}

impl EvalReport {
    /// Box accuracy is computed from the records' predicted boxes (a single
    /// operating point).
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        for r in records {
            r.validate()?;
        }
        let box_acc: BTreeMap<String, f64> = BOX_ACC_THRESHOLDS
            .iter()
            .map(|&d| (format!("{d:.2}"), gt_known(records, d)))
            .collect();
        let mean_box_acc = MEAN_BOX_ACC_THRESHOLDS
            .iter()
            .map(|&d| gt_known(records, d))
            .sum::<f64>()
            / MEAN_BOX_ACC_THRESHOLDS.len() as f64;
        Ok(Self {
            num_images: records.len(),
            gt_known: gt_known(records, 0.5),
            top1_loc: topk_loc(records, 1, 0.5),
            top5_loc: topk_loc(records, 5, 0.5),
            box_acc,
            mean_box_acc,
        })
    }

    /// Replaces box accuracies with MaxBoxAccV2 curves.
    pub fn with_curves(mut self, curves: &[BoxAccCurve]) -> Self {
        for c in curves {
            self.box_acc.insert(format!("{:.2}", c.delta), c.max);
        }
        let mean: Vec<f64> = MEAN_BOX_ACC_THRESHOLDS
            .iter()
            .filter_map(|d| self.box_acc.get(&format!("{d:.2}")).copied())
            .collect();
        if !mean.is_empty() {
            self.mean_box_acc = mean.iter().sum::<f64>() / mean.len() as f64;
        }
        self
    }

    pub fn ordering_holds(&self) -> bool {
        self.top1_loc <= self.top5_loc
            && self.top5_loc <= self.gt_known
            && [self.gt_known, self.top1_loc, self.top5_loc, self.mean_box_acc]
                .iter()
                .chain(self.box_acc.values())
                .all(|v| (0.0..=100.0).contains(v))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("images        {}\n", self.num_images));
        out.push_str(&format!("Top-1 Loc     {:6.2}\n", self.top1_loc));
        out.push_str(&format!("Top-5 Loc     {:6.2}\n", self.top5_loc));
        out.push_str(&format!("GT-Known      {:6.2}\n", self.gt_known));
        for (k, v) in &self.box_acc {
            out.push_str(&format!("BoxAcc@{k}   {v:6.2}\n"));
        }
        out.push_str(&format!("Mean          {:6.2}\n", self.mean_box_acc));
        out
    }
}

/// External classifier output: `{"image_id": ..., "top5_classes": [...]}`
/// per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub image_id: String,
    pub top5_classes: Vec<usize>,
}

/// Overrides each record's class predictions with the external ones.
pub fn merge_class_predictions(
    records: &mut [PredictionRecord],
    predictions: &[ClassPrediction],
) -> Result<()> {
    let by_id: HashMap<&str, &ClassPrediction> =
        predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    for r in records.iter_mut() {
        let p = by_id
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::Input(format!("no external class prediction for {}", r.image_id)))?;
        r.top5_classes = p.top5_classes.clone();
    }
    Ok(())
}
