use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval_metrics::BBox;
use crate::{BinaryMask, Error, Result};

use super::ImageTensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Side of the square the image is first resized to.
    pub resize: usize,
    /// Side of the square crop taken from the resized image.
    pub crop: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub flip_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize: 256,
            crop: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            flip_prob: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    /// Random crop and flip drawn from a stream keyed by `(seed, index)`.
    Train { seed: u64, index: u64 },
    /// Center crop.
    Eval,
}

/// Augmentation stream of one example, independent of worker scheduling.
pub fn augment_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Resize-crop-flip mapping from an original image to the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub src_width: usize,
    pub src_height: usize,
    pub resize: usize,
    pub x0: usize,
    pub y0: usize,
    pub crop: usize,
    pub flip: bool,
}

impl CropGeometry {
    pub fn new(
        cfg: &PreprocessConfig,
        src_width: usize,
        src_height: usize,
        mode: PreprocessMode,
    ) -> Result<Self> {
        cfg.validate()?;
        if src_width == 0 || src_height == 0 {
            return Err(Error::Input("empty image".into()));
        }
        let slack = cfg.resize - cfg.crop;
        let (x0, y0, flip) = match mode {
            PreprocessMode::Eval => (slack / 2, slack / 2, false),
            PreprocessMode::Train { seed, index } => {
                let mut rng = augment_rng(seed, index);
                let x0 = rng.random_range(0..=slack);
                let y0 = rng.random_range(0..=slack);
                (x0, y0, rng.random::<f64>() < cfg.flip_prob)
            }
        };
        Ok(Self {
            src_width,
            src_height,
            resize: cfg.resize,
            x0,
            y0,
            crop: cfg.crop,
            flip,
        })
    }

    pub fn apply_rgb(&self, image: &RgbImage) -> RgbImage {
        let resized = if image.dimensions() == (self.resize as u32, self.resize as u32) {
            image.clone()
        } else {
            image::imageops::resize(
                image,
                self.resize as u32,
                self.resize as u32,
                image::imageops::FilterType::Triangle,
            )
        };
        let mut out = image::imageops::crop_imm(
            &resized,
            self.x0 as u32,
            self.y0 as u32,
            self.crop as u32,
            self.crop as u32,
        )
        .to_image();
        if self.flip {
            image::imageops::flip_horizontal_in_place(&mut out);
        }
        out
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let m = mask
            .resize_nearest(self.resize, self.resize)
            .crop(self.x0, self.y0, self.crop, self.crop);
        if self.flip {
            m.flip_horizontal()
        } else {
            m
        }
    }

    /// Maps a box into the crop frame and clips it. The flag is set when
    /// clipping changed the box.
    pub fn apply_box(&self, b: &BBox) -> (BBox, bool) {
        let sx = self.resize as f64 / self.src_width as f64;
        let sy = self.resize as f64 / self.src_height as f64;
        let moved = b.scale(sx, sy).translate(-(self.x0 as f64), -(self.y0 as f64));
        let c = self.crop as f64;
        let clipped = moved.clip(c, c);
        let changed = clipped != moved || !clipped.is_valid();
        let out = if self.flip {
            BBox {
                x_min: c - clipped.x_max,
                y_min: clipped.y_min,
                x_max: c - clipped.x_min,
                y_max: clipped.y_max,
            }
        } else {
            clipped
        };
        (out, changed)
    }
}

pub fn normalize(image: &RgbImage, mean: [f32; 3], std: [f32; 3]) -> ImageTensor {
    let (w, h) = image.dimensions();
    ImageTensor::from_fn(h as usize, w as usize, |c, y, x| {
        let v = image.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
        (v - mean[c]) / std[c]
    })
}

#[derive(Debug, Clone)]
pub struct Preprocess {
    /// Cropped image before normalization.
    pub rgb: RgbImage,
    pub tensor: ImageTensor,
    pub gt_boxes: Vec<BBox>,
    pub boxes_clipped: bool,
    pub geometry: CropGeometry,
}

pub fn preprocess(
    image: &RgbImage,
    boxes: &[BBox],
    cfg: &PreprocessConfig,
    mode: PreprocessMode,
) -> Result<Preprocess> {
    let (w, h) = image.dimensions();
    let geometry = CropGeometry::new(cfg, w as usize, h as usize, mode)?;
    let rgb = geometry.apply_rgb(image);
    let tensor = normalize(&rgb, cfg.mean, cfg.std);
    let mut boxes_clipped = false;
    let gt_boxes = boxes
        .iter()
        .map(|b| {
            let (b, changed) = geometry.apply_box(b);
            boxes_clipped |= changed;
            b
        })
        .collect();
    Ok(Preprocess {
        rgb,
        tensor,
        gt_boxes,
        boxes_clipped,
        geometry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]))
    }

    #[test]
    fn box_rescale_halves_coordinates() {
        let cfg = PreprocessConfig {
            resize: 224,
            crop: 224,
            ..Default::default()
        };
        let g = CropGeometry::new(&cfg, 448, 448, PreprocessMode::Eval).unwrap();
        let (b, clipped) = g.apply_box(&BBox::new(40.0, 100.0, 200.0, 300.0).unwrap());
        assert_eq!(b, BBox::new(20.0, 50.0, 100.0, 150.0).unwrap());
        assert!(!clipped);
    }

    #[test]
    fn eval_is_center_crop_and_deterministic() {
        let img = gradient(300, 300);
        let cfg = PreprocessConfig::default();
        let a = preprocess(&img, &[], &cfg, PreprocessMode::Eval).unwrap();
        let b = preprocess(&img, &[], &cfg, PreprocessMode::Eval).unwrap();
        assert_eq!((a.geometry.x0, a.geometry.y0), (16, 16));
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.rgb.dimensions(), (224, 224));
    }

    #[test]
    fn train_is_seeded() {
        let img = gradient(256, 256);
        let cfg = PreprocessConfig::default();
        let m = |s, i| PreprocessMode::Train { seed: s, index: i };
        let a = preprocess(&img, &[], &cfg, m(1, 3)).unwrap();
        let b = preprocess(&img, &[], &cfg, m(1, 3)).unwrap();
        assert_eq!(a.geometry, b.geometry);
        assert_eq!(a.rgb, b.rgb);
        let distinct: std::collections::HashSet<_> = (0..20)
            .map(|i| {
                let g = preprocess(&img, &[], &cfg, m(1, i)).unwrap().geometry;
                (g.x0, g.y0, g.flip)
            })
            .collect();
        assert!(distinct.len() > 10);
    }

    #[test]
    fn normalization_constants() {
        let img = RgbImage::from_pixel(1, 1, image::Rgb([255, 0, 128]));
        let t = normalize(&img, IMAGENET_MEAN, IMAGENET_STD);
        assert!((t.get(0, 0, 0) - (1.0 - 0.485) / 0.229).abs() < 1e-6);
        assert!((t.get(1, 0, 0) - (-0.456 / 0.224)).abs() < 1e-6);
    }

    #[test]
    fn mask_and_box_follow_the_same_flip() {
        let cfg = PreprocessConfig {
            resize: 16,
            crop: 12,
            flip_prob: 1.0,
            ..Default::default()
        };
        let mode = PreprocessMode::Train { seed: 0, index: 0 };
        let g = CropGeometry::new(&cfg, 16, 16, mode).unwrap();
        assert!(g.flip);
        let m = BinaryMask::from_rect(16, 16, 5, 6, 9, 10);
        let (b, _) = g.apply_box(&BBox::new(5.0, 6.0, 9.0, 10.0).unwrap());
        let mm = g.apply_mask(&m);
        let expected = BinaryMask::from_rect(
            12,
            12,
            b.x_min as usize,
            b.y_min as usize,
            b.x_max as usize,
            b.y_max as usize,
        );
        assert_eq!(mm, expected);
    }

    proptest! {
        #[test]
        fn clipped_boxes_are_valid_or_flagged(
            seed in any::<u64>(), index in any::<u64>(),
            x in 0.0f64..400.0, y in 0.0f64..300.0, w in 1.0f64..200.0, h in 1.0f64..200.0,
        ) {
            let cfg = PreprocessConfig::default();
            let g = CropGeometry::new(&cfg, 500, 375, PreprocessMode::Train { seed, index }).unwrap();
            let (b, flagged) = g.apply_box(&BBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h });
            prop_assert!(b.is_valid() || flagged);
            prop_assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
            prop_assert!(b.x_max <= 224.0 && b.y_max <= 224.0);
        }
    }
}
