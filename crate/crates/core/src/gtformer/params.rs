use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

use super::ModelConfig;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub(crate) fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        self.vars.insert(name, Var::from_tensor(&tensor)?);
        Ok(())
    }

    /// Overwrite a parameter in place, keeping its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} is {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn dtype(&self) -> Option<DType> {
        self.vars.values().next().map(|v| v.dtype())
    }
}

/// Parameter names and shapes for a configuration, in a fixed order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let hidden = d * config.mlp_ratio;
    let mut out = vec![
        ("patch_embed.proj.weight".to_string(), vec![d, config.patch_dim()]),
        ("patch_embed.proj.bias".to_string(), vec![d]),
        (
            "global_embed.proj.weight".to_string(),
            vec![d, config.global_patch_dim()],
        ),
        ("global_embed.proj.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![1, d]),
        ("pos_embed".to_string(), vec![config.num_patches() + 1, d]),
    ];
    for i in 0..config.num_blocks {
        let b = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            (b("norm1.weight"), vec![d]),
            (b("norm1.bias"), vec![d]),
            (b("attn.qkv.weight"), vec![3 * d, d]),
            (b("attn.qkv.bias"), vec![3 * d]),
            (b("attn.proj.weight"), vec![d, d]),
            (b("attn.proj.bias"), vec![d]),
            (b("norm2.weight"), vec![d]),
            (b("norm2.bias"), vec![d]),
            (b("mlp.fc1.weight"), vec![hidden, d]),
            (b("mlp.fc1.bias"), vec![hidden]),
            (b("mlp.fc2.weight"), vec![d, hidden]),
            (b("mlp.fc2.bias"), vec![d]),
        ]);
    }
    out.extend([
        ("norm.weight".to_string(), vec![d]),
        ("norm.bias".to_string(), vec![d]),
        ("head.weight".to_string(), vec![config.num_classes, d]),
        ("head.bias".to_string(), vec![config.num_classes]),
    ]);
    out
}

enum Init {
    Zeros,
    Ones,
    TruncNormal,
}

fn init_kind(name: &str) -> Init {
    if name.contains("norm") && name.ends_with("weight") {
        Init::Ones
    } else if name.ends_with("bias") {
        Init::Zeros
    } else {
        Init::TruncNormal
    }
}

/// Sets the query and key biases of a global-aware block to the same constant
/// so that every head starts with `q·k / sqrt(d_h) = logit(initial_foreground)`
/// for all token pairs. In softmax rows the shared term is constant per row and
/// cancels.
fn seed_map_bias(config: &ModelConfig, name: &str, values: &mut [f64]) {
    let p = config.initial_foreground;
    if p <= 0.5 {
        return;
    }
    let block: Option<usize> = name
        .strip_prefix("blocks.")
        .and_then(|r| r.split('.').next())
        .and_then(|i| i.parse().ok());
    if !block.is_some_and(|i| config.is_gta_block(i)) {
        return;
    }
    let d = config.embed_dim;
    let dh = config.head_dim() as f64;
    let logit = (p / (1.0 - p)).ln();
    let c = (logit / dh.sqrt()).sqrt();
    for v in &mut values[..2 * d] {
        *v = c;
    }
}

/// From-scratch initialization: truncated normal (σ = 0.02, cut at ±2σ) for
/// projections and embeddings, unit LayerNorm gains, zero biases.
pub fn init_params(config: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::default();
    for (name, shape) in parameter_layout(config) {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init_kind(&name) {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal => (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                })
                .collect(),
        };
        let mut values = values;
        if name.ends_with("attn.qkv.bias") {
            seed_map_bias(config, &name, &mut values);
        }
        let t = Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?;
        store.insert(name, t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_deit_small() {
        let cfg = ModelConfig::deit_small(1000);
        let layout = parameter_layout(&cfg);
        assert_eq!(layout.len(), 6 + 12 * 12 + 4);
        let store = init_params(
            &ModelConfig {
                num_blocks: 2,
                num_gta_blocks: 1,
                ..cfg
            },
            DType::F32,
            &Device::Cpu,
            0,
        )
        .unwrap();
        assert_eq!(
            store.get("norm.weight").unwrap().to_vec1::<f32>().unwrap()[0],
            1.0
        );
        assert_eq!(store.get("head.bias").unwrap().to_vec1::<f32>().unwrap()[0], 0.0);
        let w = store
            .get("blocks.0.attn.qkv.weight")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(w.iter().all(|v| v.abs() <= 0.04 + 1e-7));
        assert!(w.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            num_blocks: 1,
            num_gta_blocks: 1,
            embed_dim: 12,
            num_heads: 2,
            ..ModelConfig::default()
        };
        let a = init_params(&cfg, DType::F64, &Device::Cpu, 7).unwrap();
        let b = init_params(&cfg, DType::F64, &Device::Cpu, 7).unwrap();
        let pa = a
            .get("pos_embed")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let pb = b
            .get("pos_embed")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn seeded_bias_sets_initial_logit() {
        let cfg = ModelConfig {
            num_blocks: 2,
            num_gta_blocks: 1,
            embed_dim: 12,
            num_heads: 3,
            initial_foreground: 0.8,
            ..ModelConfig::default()
        };
        let store = init_params(&cfg, DType::F64, &Device::Cpu, 0).unwrap();
        let std = store
            .get("blocks.0.attn.qkv.bias")
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(std.iter().all(|v| *v == 0.0));
        let b = store
            .get("blocks.1.attn.qkv.bias")
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let dh = cfg.head_dim();
        let qk: f64 = (0..dh).map(|j| b[j] * b[12 + j]).sum::<f64>() / (dh as f64).sqrt();
        assert!((qk - (0.8f64 / 0.2).ln()).abs() < 1e-12);
        assert!(b[24..].iter().all(|v| *v == 0.0));
    }
}
