//! Multi-head self-attention and its global-token modulated variant.

use candle_core::{Tensor, D};

use crate::Result;

/// Projection weights of one attention layer, in `(out, in)` layout.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

/// Intermediate tensors of a global-token attention pass.
#[derive(Debug, Clone)]
pub struct GtaInternals {
    /// `(B, H, T, d_h)` each.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-head foreground rows `sigmoid(Q_glb^i · Kᵀ / √d_h)`, `(B, H, G, T)`.
    pub head_maps: Tensor,
    /// Per-head fused row (mean over the global tokens), `(B, H, 1, T)`.
    pub fused: Tensor,
    /// Head-averaged per-token rows, `(B, G, T)`. These are the exported maps.
    pub token_maps: Tensor,
}

/// `x · Wᵀ + b` over the last dimension of a `(B, T, in)` tensor.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, t, d_in) = x.dims3()?;
    let d_out = weight.dim(0)?;
    let y = x
        .reshape((b * t, d_in))?
        .matmul(&weight.t()?)?
        .broadcast_add(bias)?;
    Ok(y.reshape((b, t, d_out))?)
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

fn split_heads(x: &Tensor, num_heads: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, t, three_d) = x.dims3()?;
    let d = three_d / 3;
    let head_dim = d / num_heads;
    // (B, T, 3, H, d_h) -> (3, B, H, T, d_h)
    let qkv = x
        .reshape((b, t, 3, num_heads, head_dim))?
        .permute((2, 0, 3, 1, 4))?;
    let q = qkv.get(0)?.contiguous()?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    Ok((q, k, v))
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.reshape((b, t, h * dh))?)
}

fn scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let head_dim = q.dim(D::Minus1)?;
    Ok((q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?)
}

/// Plain scaled dot-product multi-head attention followed by the output
/// projection.
pub fn multi_head_attention(x: &Tensor, w: &AttentionWeights, num_heads: usize) -> Result<Tensor> {
    let qkv = linear(x, &w.qkv_weight, &w.qkv_bias)?;
    let (q, k, v) = split_heads(&qkv, num_heads)?;
    let attn = candle_nn::ops::softmax(&scores(&q, &k)?, D::Minus1)?;
    let mixed = merge_heads(&attn.matmul(&v)?)?;
    linear(&mixed, &w.proj_weight, &w.proj_bias)
}

/// Global-token attention.
///
/// Per head, the score rows belonging to the first `num_global` tokens are
/// squashed by a sigmoid into foreground rows `M_glb^i`; their mean `M_glb`
/// multiplies every row of the softmax attention elementwise (no
/// renormalization) before the values are mixed. With `modulate = false`
/// the maps are still produced but the attention is left untouched.
pub fn global_token_attention(
    x: &Tensor,
    w: &AttentionWeights,
    num_heads: usize,
    num_global: usize,
    modulate: bool,
) -> Result<(Tensor, GtaInternals)> {
    let qkv = linear(x, &w.qkv_weight, &w.qkv_bias)?;
    let (q, k, v) = split_heads(&qkv, num_heads)?;
    let s = scores(&q, &k)?;
    let head_maps = candle_nn::ops::sigmoid(&s.narrow(2, 0, num_global)?)?;
    let fused = head_maps.mean_keepdim(2)?;
    let mut attn = candle_nn::ops::softmax(&s, D::Minus1)?;
    if modulate {
        attn = attn.broadcast_mul(&fused)?;
    }
    let mixed = merge_heads(&attn.matmul(&v)?)?;
    let out = linear(&mixed, &w.proj_weight, &w.proj_bias)?;
    let token_maps = head_maps.mean(1)?;
    Ok((
        out,
        GtaInternals {
            q,
            k,
            v,
            head_maps,
            fused,
            token_maps,
        },
    ))
}

/// Softmax attention probabilities `(B, H, T, T)` for inspection.
pub fn attention_probs(x: &Tensor, w: &AttentionWeights, num_heads: usize) -> Result<Tensor> {
    let qkv = linear(x, &w.qkv_weight, &w.qkv_bias)?;
    let (q, k, _) = split_heads(&qkv, num_heads)?;
    Ok(candle_nn::ops::softmax(&scores(&q, &k)?, D::Minus1)?)
}
