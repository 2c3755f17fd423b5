//! Training objective: classification cross-entropy plus edge and region
//! terms on the fused map `M_b` (weighted by `mu`) and on every per-token
//! map `M_l^i` (weighted by `lambda`).
//!
//! The edge and region terms sit behind [`MapLoss`] so alternative
//! formulations can be dropped in without touching the trainer.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::gtformer::ModelOutput;
use crate::{Error, HeatMap, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mu: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mu: 1.0, lambda: 0.5 }
    }
}

impl LossWeights {
    pub fn new(mu: f64, lambda: f64) -> Result<Self> {
        let w = Self { mu, lambda };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative (mu={}, lambda={})",
                self.mu, self.lambda
            )));
        }
        Ok(())
    }

    /// Parses a `mu:lambda` ratio such as `1:0.5`.
    pub fn from_ratio(ratio: &str) -> Result<Self> {
        let (mu, lambda) = ratio
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected mu:lambda, got {ratio:?}")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad loss weight {s:?}")))
        };
        Self::new(parse(mu)?, parse(lambda)?)
    }

    /// The `mu:lambda` ablation grid.
    pub fn ablation_presets() -> Vec<(&'static str, Self)> {
        [
            ("1:0", 1.0, 0.0),
            ("0:1", 0.0, 1.0),
            ("1:1", 1.0, 1.0),
            ("0.5:1", 0.5, 1.0),
            ("1:0.5", 1.0, 0.5),
        ]
        .into_iter()
        .map(|(name, mu, lambda)| (name, Self { mu, lambda }))
        .collect()
    }
}

/// Scalar values of every term of one step, batch-averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub edge_b: f64,
    pub region_b: f64,
    pub edge_l: Vec<f64>,
    pub region_l: Vec<f64>,
    pub mu: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(
        cls: f64,
        edge_b: f64,
        region_b: f64,
        edge_l: Vec<f64>,
        region_l: Vec<f64>,
        weights: LossWeights,
    ) -> Result<Self> {
        if edge_l.len() != region_l.len() {
            return Err(Error::Input(format!(
                "{} edge terms but {} region terms",
                edge_l.len(),
                region_l.len()
            )));
        }
        let total = combine(cls, edge_b, region_b, &edge_l, &region_l, weights);
        Ok(Self {
            cls,
            edge_b,
            region_b,
            edge_l,
            region_l,
            mu: weights.mu,
            lambda: weights.lambda,
            total,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            mu: self.mu,
            lambda: self.lambda,
        }
    }

    /// Recomputes the total from the components and compares bit-exactly.
    pub fn identity_holds(&self) -> bool {
        combine(
            self.cls,
            self.edge_b,
            self.region_b,
            &self.edge_l,
            &self.region_l,
            self.weights(),
        ) == self.total
    }
}

fn combine(cls: f64, edge_b: f64, region_b: f64, edge_l: &[f64], region_l: &[f64], w: LossWeights) -> f64 {
    let per_token: f64 = edge_l.iter().zip(region_l).map(|(e, r)| e + r).sum();
    cls + w.mu * (edge_b + region_b) + w.lambda * per_token
}

/// Image-edge weights `exp(-|∇I|)` at map resolution, one tensor per
/// direction: horizontal `(B, h', w'-1)` and vertical `(B, h'-1, w')`.
#[derive(Debug, Clone)]
pub struct EdgeGuide {
    pub horizontal: Tensor,
    pub vertical: Tensor,
}

impl EdgeGuide {
    /// `images` are area-downsampled by `patch_size` to the map grid; the
    /// gradient magnitude is the channel mean of absolute differences.
    pub fn from_images(
        images: &[&ImageTensor],
        patch_size: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (h, w) = (first.height() / patch_size, first.width() / patch_size);
        let mut horiz = Vec::with_capacity(images.len() * h * w.saturating_sub(1));
        let mut vert = Vec::with_capacity(images.len() * h.saturating_sub(1) * w);
        for img in images {
            let small = img.area_downsample(patch_size);
            if (small.height(), small.width()) != (h, w) {
                return Err(Error::Shape("images in a batch differ in size".into()));
            }
            let grad = |y0: usize, x0: usize, y1: usize, x1: usize| {
                let g: f32 = (0..ImageTensor::CHANNELS)
                    .map(|c| (small.get(c, y1, x1) - small.get(c, y0, x0)).abs())
                    .sum::<f32>()
                    / ImageTensor::CHANNELS as f32;
                (-g).exp()
            };
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    horiz.push(grad(y, x, y, x + 1));
                }
            }
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    vert.push(grad(y, x, y + 1, x));
                }
            }
        }
        let b = images.len();
        Ok(Self {
            horizontal: Tensor::from_vec(horiz, (b, h, w.saturating_sub(1)), device)?.to_dtype(dtype)?,
            vertical: Tensor::from_vec(vert, (b, h.saturating_sub(1), w), device)?.to_dtype(dtype)?,
        })
    }
}

/// Edge and region terms on `(B, h', w')` maps, each returning `(B,)`.
pub trait MapLoss: Send + Sync {
    fn edge(&self, maps: &Tensor, guide: &EdgeGuide) -> Result<Tensor>;
    fn region(&self, maps: &Tensor) -> Result<Tensor>;
}

/// Default formulation.
///
/// * edge: mean over pixels of `|∂x m|·exp(-|∂x I|) + |∂y m|·exp(-|∂y I|)`
///   (forward differences), which charges map edges that sit on flat image
///   regions more than map edges on image edges;
/// * region: `α·mean(m) + β·mean(min(m, 1-m))`, an area prior plus a
///   penalty on undecided (≈ 0.5) activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidedMapLoss {
    pub area_weight: f64,
    pub uncertainty_weight: f64,
}

impl Default for GuidedMapLoss {
    fn default() -> Self {
        Self {
            area_weight: 1.0,
            uncertainty_weight: 1.0,
        }
    }
}

impl GuidedMapLoss {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_weight >= 0.0 && self.uncertainty_weight >= 0.0) {
            return Err(Error::Config(format!(
                "region weights must be non-negative (area={}, uncertainty={})",
                self.area_weight, self.uncertainty_weight
            )));
        }
        Ok(())
    }
}

impl MapLoss for GuidedMapLoss {
    fn edge(&self, maps: &Tensor, guide: &EdgeGuide) -> Result<Tensor> {
        let (b, h, w) = maps.dims3()?;
        let mut acc = Tensor::zeros(b, maps.dtype(), maps.device())?;
        if w > 1 {
            let dx = (maps.narrow(2, 1, w - 1)? - maps.narrow(2, 0, w - 1)?)?.abs()?;
            acc = (acc + (dx * &guide.horizontal)?.sum((1, 2))?)?;
        }
        if h > 1 {
            let dy = (maps.narrow(1, 1, h - 1)? - maps.narrow(1, 0, h - 1)?)?.abs()?;
            acc = (acc + (dy * &guide.vertical)?.sum((1, 2))?)?;
        }
        Ok((acc / (h * w) as f64)?)
    }

    fn region(&self, maps: &Tensor) -> Result<Tensor> {
        let area = maps.mean((1, 2))?;
        let undecided = maps.minimum(&(maps.ones_like()? - maps)?)?.mean((1, 2))?;
        Ok(((area * self.area_weight)? + (undecided * self.uncertainty_weight)?)?)
    }
}

/// Mean softmax cross-entropy of `(B, C)` logits.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} outside [0, {c})")));
    }
    let targets = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        b,
        logits.device(),
    )?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?;
    Ok((picked.mean_all()? * -1.0)?)
}

/// Single-sample convenience: cross-entropy of a `(C,)` logit vector.
pub fn classification_loss_single(logits: &[f64], label: usize) -> Result<f64> {
    let t = Tensor::from_vec(logits.to_vec(), (1, logits.len()), &Device::Cpu)?;
    Ok(classification_loss(&t, &[label])?.to_scalar::<f64>()?)
}

fn heatmap_tensor(map: &HeatMap) -> Result<Tensor> {
    let values: Vec<f64> = map.values().iter().map(|&v| v as f64).collect();
    Ok(Tensor::from_vec(
        values,
        (1, map.height(), map.width()),
        &Device::Cpu,
    )?)
}

/// Edge term of one map against its image (image side must be
/// `map side × patch_size`).
pub fn edge_loss(loss: &dyn MapLoss, map: &HeatMap, image: &ImageTensor, patch_size: usize) -> Result<f64> {
    let guide = EdgeGuide::from_images(&[image], patch_size, DType::F64, &Device::Cpu)?;
    Ok(loss
        .edge(&heatmap_tensor(map)?, &guide)?
        .squeeze(0)?
        .to_scalar::<f64>()?)
}

pub fn region_loss(loss: &dyn MapLoss, map: &HeatMap) -> Result<f64> {
    Ok(loss
        .region(&heatmap_tensor(map)?)?
        .squeeze(0)?
        .to_scalar::<f64>()?)
}

/// Differentiable total plus its logged breakdown.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Builds the composite objective for one batch.
pub fn total_loss(
    output: &ModelOutput,
    labels: &[usize],
    guide: &EdgeGuide,
    weights: LossWeights,
    map_loss: &dyn MapLoss,
) -> Result<LossTerms> {
    weights.validate()?;
    let cls = classification_loss(&output.logits, labels)?;
    let fused = &output.maps.fused;
    let edge_b = map_loss.edge(fused, guide)?.mean_all()?;
    let region_b = map_loss.region(fused)?.mean_all()?;
    let mut edge_l = Vec::new();
    let mut region_l = Vec::new();
    let mut per_token_sum: Option<Tensor> = None;
    for i in 0..output.maps.num_global() {
        let m = output.maps.per_token.narrow(1, i, 1)?.squeeze(1)?;
        let e = map_loss.edge(&m, guide)?.mean_all()?;
        let r = map_loss.region(&m)?.mean_all()?;
        edge_l.push(scalar(&e)?);
        region_l.push(scalar(&r)?);
        let term = (e + r)?;
        per_token_sum = Some(match per_token_sum {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let mut total = (&cls + ((&edge_b + &region_b)? * weights.mu)?)?;
    if let Some(s) = per_token_sum {
        total = (total + (s * weights.lambda)?)?;
    }
    let breakdown = LossBreakdown::new(
        scalar(&cls)?,
        scalar(&edge_b)?,
        scalar(&region_b)?,
        edge_l,
        region_l,
        weights,
    )?;
    Ok(LossTerms { total, breakdown })
}
