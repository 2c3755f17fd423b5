//! Initialization from a timm-style DeiT checkpoint (safetensors).
//!
//! Backbone tensors (patch embedding, class token, positional embedding,
//! transformer blocks, final norm) are copied; the global embedding and the
//! class head keep their fresh initialization.

use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors};

use crate::{Error, HeatMap, Result};

use super::GtFormer;

fn read_f32(view: &safetensors::tensor::TensorView<'_>) -> Result<Vec<f32>> {
    match view.dtype() {
        Dtype::F32 => Ok(view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()),
        other => Err(Error::format(
            "DeiT weights",
            format!("expected f32 tensors, found {other:?}"),
        )),
    }
}

/// Resamples a `(n_src + 1, D)` positional table to `(n_dst + 1, D)` by
/// bilinear interpolation of the patch grid; the class row is kept.
fn resample_pos_embed(values: &[f32], src_side: usize, dst_side: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0f32; (dst_side * dst_side + 1) * dim];
    out[..dim].copy_from_slice(&values[..dim]);
    for c in 0..dim {
        let plane = HeatMap::from_fn(src_side, src_side, |y, x| {
            values[(1 + y * src_side + x) * dim + c]
        });
        let resized = plane.resize_bilinear(dst_side, dst_side);
        for (i, v) in resized.values().iter().enumerate() {
            out[(1 + i) * dim + c] = *v;
        }
    }
    out
}

/// Copies matching backbone tensors into `model`. Returns the names loaded.
pub fn load_deit_weights(model: &GtFormer, path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes)?;
    let cfg = model.config().clone();
    let d = cfg.embed_dim;
    let mut loaded = Vec::new();
    for (name, view) in st.tensors() {
        let target = name.as_str();
        let Some(var) = model.params().var(target) else {
            continue;
        };
        if target.starts_with("head.") {
            continue;
        }
        if let Some(rest) = target.strip_prefix("blocks.") {
            let idx: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(usize::MAX);
            if idx >= cfg.num_blocks {
                continue;
            }
        }
        let values = read_f32(&view)?;
        let src_shape = view.shape().to_vec();
        let values = if target == "pos_embed" && values.len() != var.elem_count() {
            let n_src = values.len() / d - 1;
            let src_side = (n_src as f64).sqrt().round() as usize;
            if src_side * src_side != n_src || values.len() % d != 0 {
                return Err(Error::Shape(format!(
                    "cannot resample positional embedding of shape {src_shape:?}"
                )));
            }
            resample_pos_embed(&values, src_side, cfg.grid_side(), d)
        } else {
            values
        };
        if values.len() != var.elem_count() {
            return Err(Error::Shape(format!(
                "DeiT tensor {name} has shape {src_shape:?}, model expects {:?}",
                var.dims()
            )));
        }
        let t = Tensor::from_vec(values, var.shape(), &Device::Cpu)?.to_dtype(model.dtype())?;
        model.params().assign(target, &t)?;
        loaded.push(name);
    }
    if loaded.is_empty() {
        return Err(Error::format("DeiT weights", "no matching tensors found"));
    }
    loaded.sort();
    Ok(loaded)
}
