//! Mask galleries from grid-point prompts.
//!
//! A [`MaskProvider`] turns an image plus a lattice of point prompts into a
//! set of binary instance masks. The real backend is a frozen
//! segment-anything model ([`sam`], behind the `sam` feature); tests and
//! desk-scale runs use [`FakeProvider`], which replays ground-truth
//! instance masks.

mod cache;
mod fake;
mod gallery;
mod grid;
#[cfg(feature = "sam")]
pub mod sam;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::GalleryCache;
pub use fake::FakeProvider;
pub use gallery::{rle_decode, rle_encode, MaskGallery, MAGIC};
pub use grid::{generate_grid_points, GridPoint, GridPromptConfig};

use crate::{BinaryMask, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub name: String,
    pub version: String,
}

/// Point-prompted automatic mask generation.
///
/// Implementations must be deterministic for a fixed image, point set and
/// configuration.
pub trait MaskProvider: Send + Sync {
    fn descriptor(&self) -> ProviderDescriptor;

    /// Provider-specific settings folded into the cache key.
    fn settings(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    /// Raw masks at the image resolution, after the provider's own
    /// post-processing.
    fn generate(&self, image_id: &str, image: &RgbImage, points: &[GridPoint]) -> Result<Vec<BinaryMask>>;
}

/// Cache key of a provider configuration: the first 16 hex digits of the
/// SHA-256 of its canonical JSON description.
pub fn config_hash(provider: &dyn MaskProvider, grid: &GridPromptConfig) -> String {
    let desc = provider.descriptor();
    let record = serde_json::json!({
        "provider": desc.name,
        "version": desc.version,
        "grid_side": grid.grid_side,
        "settings": provider.settings(),
    });
    let digest = Sha256::digest(record.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// Runs `provider` on one image and packages the non-empty masks.
pub fn generate_gallery(
    image_id: &str,
    image: &RgbImage,
    points: &[GridPoint],
    provider: &dyn MaskProvider,
    config_hash: &str,
) -> Result<MaskGallery> {
    let (w, h) = image.dimensions();
    let (h, w) = (h as usize, w as usize);
    let raw = provider.generate(image_id, image, points).map_err(|e| match e {
        e @ Error::Provider { .. } => e,
        other => Error::Provider {
            image_id: image_id.to_string(),
            msg: other.to_string(),
        },
    })?;
    let mut masks = Vec::with_capacity(raw.len());
    for m in raw {
        if m.shape() != (h, w) {
            return Err(Error::Provider {
                image_id: image_id.to_string(),
                msg: format!("mask of shape {:?} for a {h}x{w} image", m.shape()),
            });
        }
        if !m.is_empty() {
            masks.push(m);
        }
    }
    Ok(MaskGallery {
        image_id: image_id.to_string(),
        height: h,
        width: w,
        masks,
        provider: provider.descriptor().name,
        config_hash: config_hash.to_string(),
    })
}
