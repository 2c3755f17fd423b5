use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyper-parameters of a GTFormer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Total transformer blocks, standard and global-aware.
    pub num_blocks: usize,
    /// How many of the trailing blocks are global-aware.
    pub num_gta_blocks: usize,
    pub num_global_tokens: usize,
    pub num_classes: usize,
    /// Side of the bilinearly downsampled image feeding the global embedding.
    pub downsample_size: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
    /// When false, global-aware blocks still export foreground maps but do
    /// not modulate their attention (the "w/o-GTA" ablation).
    pub gta_modulation: bool,
    /// Average the exported maps over all global-aware blocks instead of
    /// reading only the last one.
    pub average_gta_maps: bool,
    /// Foreground probability the global-aware blocks start from when
    /// initialized from scratch. 0.5 leaves the query/key biases at zero;
    /// larger values seed a shared query/key bias direction per head.
    pub initial_foreground: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 384,
            num_heads: 6,
            num_blocks: 12,
            num_gta_blocks: 4,
            num_global_tokens: 4,
            num_classes: 200,
            downsample_size: 32,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
            gta_modulation: true,
            average_gta_maps: false,
            initial_foreground: 0.5,
        }
    }
}

impl ModelConfig {
    /// DeiT-S backbone geometry with the given number of classes.
    pub fn deit_small(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image and patch size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_gta_blocks == 0 || self.num_gta_blocks > self.num_blocks {
            return fail(format!(
                "num_gta_blocks must be in 1..={} (got {})",
                self.num_blocks, self.num_gta_blocks
            ));
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("num_classes and mlp_ratio must be positive".into());
        }
        let k = self.window_size()?;
        if self.downsample_size == 0 || self.downsample_size % k != 0 {
            return fail(format!(
                "window {k} does not evenly divide downsample_size {}",
                self.downsample_size
            ));
        }
        if !(0.5..1.0).contains(&self.initial_foreground) {
            return fail(format!(
                "initial_foreground must be in [0.5, 1) (got {})",
                self.initial_foreground
            ));
        }
        Ok(())
    }

    /// Window side `k` of the global embedding, `k² = num_global_tokens`.
    pub fn window_size(&self) -> Result<usize> {
        let k = (self.num_global_tokens as f64).sqrt().round() as usize;
        if k == 0 || k * k != self.num_global_tokens {
            return Err(Error::Config(format!(
                "num_global_tokens {} is not a perfect square",
                self.num_global_tokens
            )));
        }
        Ok(k)
    }

    /// Patches per side, `h / P`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Global tokens, patch tokens and the class token.
    pub fn seq_len(&self) -> usize {
        self.num_global_tokens + self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn global_patch_dim(&self) -> usize {
        let k = self.window_size().unwrap_or(1);
        let side = self.downsample_size / k;
        3 * side * side
    }

    pub fn num_standard_blocks(&self) -> usize {
        self.num_blocks - self.num_gta_blocks
    }

    pub fn is_gta_block(&self, index: usize) -> bool {
        index >= self.num_standard_blocks()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_deit_small_layout() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.seq_len(), 201);
        assert_eq!(cfg.window_size().unwrap(), 2);
        assert_eq!(cfg.global_patch_dim(), 16 * 16 * 3);
    }

    #[test]
    fn rejects_bad_geometry() {
        let cfg = ModelConfig {
            image_size: 225,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            num_heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            num_gta_blocks: 13,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            num_global_tokens: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        // k = 4 does not tile a 30 pixel downsample
        let cfg = ModelConfig {
            num_global_tokens: 16,
            downsample_size: 30,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_token_counts_validate() {
        for g in [1, 4, 16] {
            let cfg = ModelConfig {
                num_global_tokens: g,
                ..ModelConfig::default()
            };
            cfg.validate().unwrap();
        }
    }
}
