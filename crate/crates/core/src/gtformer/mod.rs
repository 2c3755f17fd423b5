//! Global Token Transformer.
//!
//! A ViT whose token sequence is `[global tokens | patch tokens | class
//! token]`. The leading blocks are ordinary pre-norm transformer blocks; the
//! trailing global-aware blocks swap self-attention for global-token
//! attention, whose sigmoid foreground rows gate the attention and are
//! cropped to the patch grid to give per-token localization maps `M_l^i`
//! and their mean `M_b`.

mod attention;
mod checkpoint;
mod config;
mod deit;
pub mod embed;
mod params;

use candle_core::{DType, Device, Tensor};

pub use attention::{
    attention_probs, global_token_attention, layer_norm, linear, multi_head_attention, AttentionWeights,
    GtaInternals,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use config::ModelConfig;
pub use deit::load_deit_weights;
pub use params::{init_params, parameter_layout, ParamStore, INIT_STD};

use crate::data::ImageTensor;
use crate::{Error, HeatMap, Result};

/// Model inputs rearranged for the two projections.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `(B, N, 3·P²)`.
    pub patches: Tensor,
    /// `(B, G, 3·(ds/k)²)`.
    pub global_patches: Tensor,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.patches.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(B, T, D)` tokens laid out as `[global | patch | class]`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub num_global: usize,
    pub num_patches: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, num_global: usize, num_patches: usize) -> Result<Self> {
        let t = tokens.dim(1)?;
        if t != num_global + num_patches + 1 {
            return Err(Error::Shape(format!(
                "sequence of length {t} does not hold {num_global} global, {num_patches} patch and 1 class token"
            )));
        }
        Ok(Self {
            tokens,
            num_global,
            num_patches,
        })
    }

    pub fn len(&self) -> usize {
        self.num_global + self.num_patches + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn global_tokens(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, 0, self.num_global)?)
    }

    pub fn patch_tokens(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, self.num_global, self.num_patches)?)
    }

    pub fn class_token(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, self.len() - 1, 1)?.squeeze(1)?)
    }

    fn with_tokens(&self, tokens: Tensor) -> Self {
        Self {
            tokens,
            num_global: self.num_global,
            num_patches: self.num_patches,
        }
    }
}

/// Per-token localization maps and their mean.
#[derive(Debug, Clone)]
pub struct ForegroundMaps {
    /// `(B, G, h/P, w/P)`.
    pub per_token: Tensor,
    /// `(B, h/P, w/P)`.
    pub fused: Tensor,
}

impl ForegroundMaps {
    /// Crops the patch columns out of `(B, G, T)` foreground rows.
    pub fn from_rows(rows: &Tensor, num_global: usize, grid_side: usize) -> Result<Self> {
        let (b, g, _) = rows.dims3()?;
        let per_token = rows
            .narrow(2, num_global, grid_side * grid_side)?
            .reshape((b, g, grid_side, grid_side))?;
        let fused = per_token.mean(1)?;
        Ok(Self { per_token, fused })
    }

    pub fn num_global(&self) -> usize {
        self.per_token.dims()[1]
    }

    pub fn fused_map(&self, index: usize) -> Result<HeatMap> {
        to_heatmap(&self.fused.get(index)?)
    }

    pub fn token_maps(&self, index: usize) -> Result<Vec<HeatMap>> {
        let maps = self.per_token.get(index)?;
        (0..self.num_global())
            .map(|i| to_heatmap(&maps.get(i)?))
            .collect()
    }
}

fn to_heatmap(t: &Tensor) -> Result<HeatMap> {
    let (h, w) = t.dims2()?;
    let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    HeatMap::from_vec(h, w, values)
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(B, C)`.
    pub logits: Tensor,
    pub maps: ForegroundMaps,
    /// Head-averaged `(B, G, T)` foreground rows of every global-aware block.
    pub gta_rows: Vec<Tensor>,
}

#[derive(Debug)]
pub struct GtFormer {
    config: ModelConfig,
    params: ParamStore,
    dtype: DType,
    device: Device,
}

impl GtFormer {
    /// Freshly initialized model on the CPU.
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let params = init_params(&config, dtype, &device, seed)?;
        Ok(Self {
            config,
            params,
            dtype,
            device,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape) in parameter_layout(&config) {
            let t = params.get(&name)?;
            if t.dims() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.dims()
                )));
            }
        }
        let dtype = params
            .dtype()
            .ok_or_else(|| Error::Config("empty parameter store".into()))?;
        Ok(Self {
            config,
            params,
            dtype,
            device: Device::Cpu,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    pub fn prepare(&self, images: &[&ImageTensor]) -> Result<ImageBatch> {
        if images.is_empty() {
            return Err(Error::Input("empty image batch".into()));
        }
        let cfg = &self.config;
        let mut patches = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
        let mut globals = Vec::with_capacity(images.len() * cfg.num_global_tokens * cfg.global_patch_dim());
        for img in images {
            patches.extend(embed::patch_rows(img, cfg)?);
            globals.extend(embed::global_patch_rows(img, cfg)?);
        }
        let b = images.len();
        let patches = Tensor::from_vec(patches, (b, cfg.num_patches(), cfg.patch_dim()), &self.device)?
            .to_dtype(self.dtype)?;
        let global_patches = Tensor::from_vec(
            globals,
            (b, cfg.num_global_tokens, cfg.global_patch_dim()),
            &self.device,
        )?
        .to_dtype(self.dtype)?;
        Ok(ImageBatch {
            patches,
            global_patches,
        })
    }

    /// Patch tokens `(B, N, D)`: linear patch projection plus positional
    /// embedding.
    pub fn embed_patches(&self, batch: &ImageBatch) -> Result<Tensor> {
        let x = linear(
            &batch.patches,
            self.p("patch_embed.proj.weight")?,
            self.p("patch_embed.proj.bias")?,
        )?;
        let pos = self.p("pos_embed")?.narrow(0, 1, self.config.num_patches())?;
        Ok(x.broadcast_add(&pos)?)
    }

    /// Global tokens `(B, G, D)`, one shared projection over all global patches.
    pub fn embed_global_tokens(&self, batch: &ImageBatch) -> Result<Tensor> {
        linear(
            &batch.global_patches,
            self.p("global_embed.proj.weight")?,
            self.p("global_embed.proj.bias")?,
        )
    }

    /// Concatenates `[global | patch | class]`.
    pub fn assemble(&self, global: &Tensor, patches: &Tensor) -> Result<TokenSequence> {
        let (b, _, d) = patches.dims3()?;
        let cls = (self.p("cls_token")? + self.p("pos_embed")?.narrow(0, 0, 1)?)?
            .unsqueeze(0)?
            .broadcast_as((b, 1, d))?;
        let tokens = Tensor::cat(&[global, patches, &cls], 1)?;
        TokenSequence::new(tokens, self.config.num_global_tokens, self.config.num_patches())
    }

    pub fn embed(&self, batch: &ImageBatch) -> Result<TokenSequence> {
        let patches = self.embed_patches(batch)?;
        let global = self.embed_global_tokens(batch)?;
        self.assemble(&global, &patches)
    }

    pub fn attention_weights(&self, block: usize) -> Result<AttentionWeights> {
        let b = |s: &str| format!("blocks.{block}.attn.{s}");
        Ok(AttentionWeights {
            qkv_weight: self.p(&b("qkv.weight"))?.clone(),
            qkv_bias: self.p(&b("qkv.bias"))?.clone(),
            proj_weight: self.p(&b("proj.weight"))?.clone(),
            proj_bias: self.p(&b("proj.bias"))?.clone(),
        })
    }

    fn norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        layer_norm(
            x,
            self.p(&format!("{prefix}.weight"))?,
            self.p(&format!("{prefix}.bias"))?,
            self.config.layer_norm_eps,
        )
    }

    fn mlp(&self, x: &Tensor, block: usize) -> Result<Tensor> {
        let b = |s: &str| format!("blocks.{block}.mlp.{s}");
        let h = linear(x, self.p(&b("fc1.weight"))?, self.p(&b("fc1.bias"))?)?.gelu_erf()?;
        linear(&h, self.p(&b("fc2.weight"))?, self.p(&b("fc2.bias"))?)
    }

    /// Pre-norm transformer block: `x + MSA(LN(x))`, then `+ MLP(LN(·))`.
    pub fn standard_block(&self, block: usize, seq: &TokenSequence) -> Result<TokenSequence> {
        let x = &seq.tokens;
        let normed = self.norm(x, &format!("blocks.{block}.norm1"))?;
        let attn = multi_head_attention(&normed, &self.attention_weights(block)?, self.config.num_heads)?;
        let k = (x + attn)?;
        let out = (&k + self.mlp(&self.norm(&k, &format!("blocks.{block}.norm2"))?, block)?)?;
        Ok(seq.with_tokens(out))
    }

    /// Global-aware block. Returns the updated sequence and the head-averaged
    /// foreground rows `(B, G, T)` of this block.
    pub fn gta_block(&self, block: usize, seq: &TokenSequence) -> Result<(TokenSequence, Tensor)> {
        self.gta_block_with(block, seq, self.config.gta_modulation)
    }

    pub fn gta_block_with(
        &self,
        block: usize,
        seq: &TokenSequence,
        modulate: bool,
    ) -> Result<(TokenSequence, Tensor)> {
        let x = &seq.tokens;
        let normed = self.norm(x, &format!("blocks.{block}.norm1"))?;
        let (attn, internals) = global_token_attention(
            &normed,
            &self.attention_weights(block)?,
            self.config.num_heads,
            seq.num_global,
            modulate,
        )?;
        let k = (x + attn)?;
        let out = (&k + self.mlp(&self.norm(&k, &format!("blocks.{block}.norm2"))?, block)?)?;
        Ok((seq.with_tokens(out), internals.token_maps))
    }

    /// Runs all blocks, the final norm and the class head on an assembled
    /// sequence.
    pub fn forward_sequence(&self, seq: TokenSequence) -> Result<ModelOutput> {
        let mut seq = seq;
        let mut gta_rows = Vec::with_capacity(self.config.num_gta_blocks);
        for block in 0..self.config.num_blocks {
            if self.config.is_gta_block(block) {
                let (next, rows) = self.gta_block(block, &seq)?;
                gta_rows.push(rows);
                seq = next;
            } else {
                seq = self.standard_block(block, &seq)?;
            }
        }
        let rows = if self.config.average_gta_maps && gta_rows.len() > 1 {
            (Tensor::stack(&gta_rows, 0)?.sum(0)? / gta_rows.len() as f64)?
        } else {
            gta_rows
                .last()
                .cloned()
                .ok_or_else(|| Error::Config("model has no global-aware block".into()))?
        };
        let maps = ForegroundMaps::from_rows(&rows, seq.num_global, self.config.grid_side())?;
        let normed = self.norm(&seq.tokens, "norm")?;
        let cls = normed.narrow(1, seq.len() - 1, 1)?.squeeze(1)?;
        let logits = cls
            .matmul(&self.p("head.weight")?.t()?)?
            .broadcast_add(self.p("head.bias")?)?;
        Ok(ModelOutput {
            logits,
            maps,
            gta_rows,
        })
    }

    pub fn forward(&self, batch: &ImageBatch) -> Result<ModelOutput> {
        self.forward_sequence(self.embed(batch)?)
    }

    pub fn forward_images(&self, images: &[&ImageTensor]) -> Result<ModelOutput> {
        self.forward(&self.prepare(images)?)
    }
}
