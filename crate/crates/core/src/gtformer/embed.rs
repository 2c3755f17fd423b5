//! Rearranges raw pixels into the rows that the patch and global
//! projections consume. The projections themselves live on the model.

use crate::data::ImageTensor;
use crate::{Error, Result};

use super::ModelConfig;

fn check_size(image: &ImageTensor, config: &ModelConfig) -> Result<()> {
    if image.height() != config.image_size || image.width() != config.image_size {
        return Err(Error::Config(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            config.image_size,
            config.image_size
        )));
    }
    Ok(())
}

/// Flattened non-overlapping `P × P` patches in raster order, each laid out
/// as `(channel, y, x)` so a conv-style `(D, 3, P, P)` kernel reshapes onto it.
pub fn patch_rows(image: &ImageTensor, config: &ModelConfig) -> Result<Vec<f32>> {
    check_size(image, config)?;
    let p = config.patch_size;
    let side = config.grid_side();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for c in 0..ImageTensor::CHANNELS {
                for y in 0..p {
                    for x in 0..p {
                        out.push(image.get(c, py * p + y, px * p + x));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Global patches of the downsampled image.
///
/// The downsampled image is scanned by a `k × k` window with stride `k`.
/// Global patch `(i, j)` collects the pixel at in-window offset `(i, j)` from
/// every window, so each patch is a strided subsampling of the whole image
/// of side `downsample_size / k`. Patches are ordered row-major in `(i, j)`.
pub fn global_patch_rows(image: &ImageTensor, config: &ModelConfig) -> Result<Vec<f32>> {
    check_size(image, config)?;
    let k = config.window_size()?;
    let ds = config.downsample_size;
    if ds % k != 0 {
        return Err(Error::Config(format!(
            "window {k} does not evenly divide downsample_size {ds}"
        )));
    }
    let small = image.resize_bilinear(ds, ds);
    let cells = ds / k;
    let mut out = Vec::with_capacity(config.num_global_tokens * config.global_patch_dim());
    for i in 0..k {
        for j in 0..k {
            for c in 0..ImageTensor::CHANNELS {
                for a in 0..cells {
                    for b in 0..cells {
                        out.push(small.get(c, a * k + i, b * k + j));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(image: usize, patch: usize, tokens: usize, ds: usize) -> ModelConfig {
        ModelConfig {
            image_size: image,
            patch_size: patch,
            num_global_tokens: tokens,
            downsample_size: ds,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn patch_count_and_layout() {
        let config = cfg(224, 16, 4, 32);
        let img = ImageTensor::from_fn(224, 224, |c, y, x| (c * 1_000_000 + y * 1000 + x) as f32);
        let rows = patch_rows(&img, &config).unwrap();
        assert_eq!(rows.len(), 196 * 3 * 16 * 16);
        // second patch in the first row starts at pixel (0, 16) of channel 0
        assert_eq!(rows[3 * 256], 16.0);
        // green channel of the first patch
        assert_eq!(rows[256], 1_000_000.0);
    }

    #[test]
    fn wrong_image_size_is_a_config_error() {
        let config = cfg(224, 16, 4, 32);
        let img = ImageTensor::zeros(225, 224);
        assert!(matches!(patch_rows(&img, &config), Err(Error::Config(_))));
        assert!(global_patch_rows(&img, &config).is_err());
    }

    #[test]
    fn global_patches_are_strided_subsamples() {
        // Downsampling a 32x32 image to 32x32 is the identity.
        let config = cfg(32, 16, 4, 32);
        let img = ImageTensor::from_fn(32, 32, |c, y, x| (c * 10_000 + y * 100 + x) as f32);
        let rows = global_patch_rows(&img, &config).unwrap();
        let dim = 3 * 16 * 16;
        assert_eq!(rows.len(), 4 * dim);
        // token (1,2) in 1-based numbering is offset (0,1)
        let tok = &rows[dim..2 * dim];
        assert_eq!(tok[0], 1.0); // pixel (0, 1)
        assert_eq!(tok[1], 3.0); // pixel (0, 3)
        assert_eq!(tok[16], 201.0); // pixel (2, 1)
                                    // token (2,1) → offset (1,0)
        assert_eq!(rows[2 * dim], 100.0);
    }

    #[test]
    fn single_and_sixteen_token_windows() {
        let img = ImageTensor::from_fn(32, 32, |_, y, x| (y * 32 + x) as f32);
        let one = global_patch_rows(&img, &cfg(32, 16, 1, 32)).unwrap();
        assert_eq!(one.len(), 3 * 32 * 32);
        assert_eq!(&one[..32 * 32], img.data().get(..32 * 32).unwrap());
        let sixteen = global_patch_rows(&img, &cfg(32, 16, 16, 32)).unwrap();
        assert_eq!(sixteen.len(), 16 * 3 * 8 * 8);
    }
}
