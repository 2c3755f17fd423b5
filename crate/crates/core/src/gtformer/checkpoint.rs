//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries the model configuration as JSON.
//!
//! All records live under one metadata key as a canonical (sorted) JSON
//! object; safetensors writes its metadata map in hash order, so several
//! keys would make the file bytes vary between saves.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::{Error, Result};

use super::{GtFormer, ModelConfig, ParamStore};

const FORMAT: &str = "pro2sam-checkpoint";
const FORMAT_VERSION: &str = "1";
const METADATA_KEY: &str = "pro2sam";
const MODEL_PREFIX: &str = "model.";
const FIRST_MOMENT_PREFIX: &str = "optim.m.";
const SECOND_MOMENT_PREFIX: &str = "optim.v.";

/// AdamW moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: usize,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: GtFormer,
    pub optimizer: Option<OptimizerState>,
    /// Free-form string records (experiment config, epoch, ...).
    pub extra: BTreeMap<String, String>,
}

struct RawTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &RawTensor {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<RawTensor> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        other => {
            return Err(Error::Config(format!(
                "checkpoints support f32/f64 tensors, got {other:?}"
            )))
        }
    };
    Ok(RawTensor { dtype, shape, bytes })
}

fn from_view(view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported tensor dtype {other:?}"),
            ))
        }
    };
    Ok(t)
}

pub fn save_checkpoint(
    path: &Path,
    model: &GtFormer,
    optimizer: Option<&OptimizerState>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut tensors: Vec<(String, RawTensor)> = Vec::new();
    for (name, var) in model.params().iter() {
        tensors.push((format!("{MODEL_PREFIX}{name}"), to_raw(var.as_tensor())?));
    }
    let mut metadata: BTreeMap<String, String> = extra
        .iter()
        .map(|(k, v)| (format!("extra.{k}"), v.clone()))
        .collect();
    metadata.insert("format".into(), FORMAT.into());
    metadata.insert("format_version".into(), FORMAT_VERSION.into());
    metadata.insert("config".into(), serde_json::to_string(model.config())?);
    if let Some(opt) = optimizer {
        metadata.insert("optim.step".into(), opt.step.to_string());
        for (name, t) in &opt.first_moment {
            tensors.push((format!("{FIRST_MOMENT_PREFIX}{name}"), to_raw(t)?));
        }
        for (name, t) in &opt.second_moment {
            tensors.push((format!("{SECOND_MOMENT_PREFIX}{name}"), to_raw(t)?));
        }
    }
    let header = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&metadata)?)]);
    let bytes = safetensors::tensor::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(header))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta: BTreeMap<String, String> = serde_json::from_str(
        header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::format("checkpoint", "missing header metadata"))?,
    )?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::format("checkpoint", "not a pro2sam checkpoint"));
    }
    let config: ModelConfig = serde_json::from_str(
        meta.get("config")
            .ok_or_else(|| Error::format("checkpoint", "missing config record"))?,
    )?;
    let st = SafeTensors::deserialize(&bytes)?;
    let mut params = ParamStore::default();
    let mut optimizer = OptimizerState::default();
    let mut has_optimizer = false;
    for (name, view) in st.tensors() {
        let t = from_view(&view)?;
        if let Some(n) = name.strip_prefix(MODEL_PREFIX) {
            params.insert(n.to_string(), t)?;
        } else if let Some(n) = name.strip_prefix(FIRST_MOMENT_PREFIX) {
            optimizer.first_moment.insert(n.to_string(), t);
            has_optimizer = true;
        } else if let Some(n) = name.strip_prefix(SECOND_MOMENT_PREFIX) {
            optimizer.second_moment.insert(n.to_string(), t);
            has_optimizer = true;
        }
    }
    if let Some(step) = meta.get("optim.step") {
        optimizer.step = step
            .parse()
            .map_err(|_| Error::format("checkpoint", "bad optimizer step"))?;
        has_optimizer = true;
    }
    let extra = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint {
        model: GtFormer::from_params(config, params)?,
        optimizer: has_optimizer.then_some(optimizer),
        extra,
    })
}
