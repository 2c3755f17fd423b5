//! Synthetic shapes on textured backgrounds.
//!
//! Each class is a shape kind painted in a class-specific saturated color on
//! a dark textured background. Optional distractors are mid-gray shapes that
//! never overlap the object. Every image carries the exact object mask and its tight box, and
//! the distractor masks, so the fake mask provider can serve a realistic
//! gallery (object, distractors, background).
//!
//! On disk: `synth.json` plus `images/*.png` and `masks/*.png` (0/255).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval_metrics::{bbox_from_mask, BBox};
use crate::io::{read_json, write_atomic, write_json};
use crate::mask_provider::FakeProvider;
use crate::{BinaryMask, Error, Result};

use super::preprocess::{augment_rng, CropGeometry, PreprocessConfig, PreprocessMode};
use super::{Dataset, Example, Record, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub canvas: usize,
    /// Class `c` uses `shapes[c % shapes.len()]`.
    pub shapes: Vec<ShapeKind>,
    /// Object side range as a fraction of the canvas.
    pub object_size: (f32, f32),
    pub distractor_size: (f32, f32),
    pub max_distractors: usize,
    /// Range of the background gray level.
    pub background: (f32, f32),
    /// Range of the distractor gray level.
    pub distractor_gray: (f32, f32),
    /// Amplitude of the per-pixel uniform noise, in [0, 1] intensity units.
    pub noise: f32,
    /// Amplitude of the sinusoidal background texture.
    pub texture: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 50,
            test_per_class: 20,
            canvas: 64,
            shapes: vec![ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Triangle],
            object_size: (0.35, 0.6),
            distractor_size: (0.15, 0.25),
            max_distractors: 2,
            background: (0.05, 0.3),
            distractor_gray: (0.3, 0.6),
            noise: 0.06,
            texture: 0.08,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_classes == 0 || self.shapes.is_empty() {
            return bad("need at least one class and one shape kind");
        }
        if self.canvas < 8 {
            return bad("canvas must be at least 8 pixels");
        }
        for (lo, hi) in [self.object_size, self.distractor_size] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return bad("size ranges must satisfy 0 < lo <= hi <= 1");
            }
        }
        for (lo, hi) in [self.background, self.distractor_gray] {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return bad("gray ranges must satisfy 0 <= lo < hi <= 1");
            }
        }
        Ok(())
    }

    pub fn class_shape(&self, class: usize) -> ShapeKind {
        self.shapes[class % self.shapes.len()]
    }

    /// Evenly spaced saturated hues.
    pub fn class_color(&self, class: usize) -> [f32; 3] {
        hsv_to_rgb(class as f32 / self.num_classes as f32, 0.85, 0.9)
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rasterizes a shape inscribed in `[x0, x0+w) × [y0, y0+h)` by pixel-center
/// inclusion.
pub fn rasterize(kind: ShapeKind, size: usize, x0: usize, y0: usize, w: usize, h: usize) -> BinaryMask {
    let (fx0, fy0, fw, fh) = (x0 as f32, y0 as f32, w as f32, h as f32);
    BinaryMask::from_fn(size, size, |y, x| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        if px < fx0 || py < fy0 || px > fx0 + fw || py > fy0 + fh {
            return false;
        }
        match kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let dx = (px - (fx0 + fw / 2.0)) / (fw / 2.0);
                let dy = (py - (fy0 + fh / 2.0)) / (fh / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Triangle => {
                // apex at top center, base along the bottom edge
                let t = (py - fy0) / fh;
                ((px - (fx0 + fw / 2.0)).abs()) <= t * fw / 2.0
            }
        }
    })
}

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub image_id: String,
    pub split: Split,
    pub label: usize,
    pub image: RgbImage,
    pub object_mask: BinaryMask,
    pub distractor_masks: Vec<BinaryMask>,
    pub gt_box: BBox,
}

impl SynthItem {
    /// Object first, then distractors.
    pub fn instance_masks(&self) -> Vec<BinaryMask> {
        let mut v = vec![self.object_mask.clone()];
        v.extend(self.distractor_masks.iter().cloned());
        v
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub items: Vec<SynthItem>,
    /// Directory the corpus was written to or loaded from.
    pub root: Option<PathBuf>,
}

fn place<R: Rng>(rng: &mut R, canvas: usize, range: (f32, f32)) -> (usize, usize, usize, usize) {
    let c = canvas as f32;
    let lo = ((range.0 * c).round() as usize).max(3);
    let hi = ((range.1 * c).round() as usize).clamp(lo, canvas);
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let x0 = rng.random_range(0..=canvas - w);
    let y0 = rng.random_range(0..=canvas - h);
    (x0, y0, w, h)
}

fn render_item(spec: &SynthSpec, split: Split, label: usize, index: usize, stream: u64) -> Result<SynthItem> {
    let mut rng = augment_rng(spec.seed, stream);
    let n = spec.canvas;
    let kind = spec.class_shape(label);
    let object_mask = loop {
        let (x0, y0, w, h) = place(&mut rng, n, spec.object_size);
        let m = rasterize(kind, n, x0, y0, w, h);
        if m.count() >= 9 {
            break m;
        }
    };

    let mut occupied = object_mask.clone();
    let mut distractor_masks = Vec::new();
    let wanted = rng.random_range(0..=spec.max_distractors);
    let mut attempts = 0;
    while distractor_masks.len() < wanted && attempts < 50 {
        attempts += 1;
        let dk = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let (x0, y0, w, h) = place(&mut rng, n, spec.distractor_size);
        let m = rasterize(dk, n, x0, y0, w, h);
        // keep a one-pixel gap so instances stay separate components
        let grown = BinaryMask::from_rect(
            n,
            n,
            x0.saturating_sub(1),
            y0.saturating_sub(1),
            (x0 + w + 1).min(n),
            (y0 + h + 1).min(n),
        );
        if m.is_empty() || occupied.overlap_counts(&grown)?.0 > 0 {
            continue;
        }
        occupied = occupied.union(&m)?;
        distractor_masks.push(m);
    }

    // background: tinted dark gray with two sinusoids
    let base: f32 = rng.random_range(spec.background.0..spec.background.1);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let waves: Vec<(f32, f32, f32)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let color = spec.class_color(label);
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let grays: Vec<f32> = distractor_masks
        .iter()
        .map(|_| rng.random_range(spec.distractor_gray.0..spec.distractor_gray.1))
        .collect();

    let mut image = RgbImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let tex: f32 = waves
                .iter()
                .map(|&(a, b, p)| (a * x as f32 + b * y as f32 + p).sin())
                .sum::<f32>()
                * spec.texture
                / 2.0;
            let mut px: [f32; 3] = std::array::from_fn(|c| base + tint[c] + tex);
            if object_mask.get(y, x) {
                px = std::array::from_fn(|c| color[c] + jitter[c]);
            } else if let Some(k) = distractor_masks.iter().position(|m| m.get(y, x)) {
                px = [grays[k]; 3];
            }
            let rgb: [u8; 3] = std::array::from_fn(|c| {
                let v = px[c] + rng.random_range(-spec.noise..=spec.noise);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            image.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
    let gt_box = bbox_from_mask(&object_mask)?;
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    Ok(SynthItem {
        image_id: format!("{prefix}/c{label}_{index:03}"),
        split,
        label,
        image,
        object_mask,
        distractor_masks,
        gt_box,
    })
}

/// Deterministic in `spec`; items are ordered train then test, class-major.
pub fn generate_synth(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut items = Vec::new();
    let mut stream = 0u64;
    for (split, per_class) in [
        (Split::Train, spec.train_per_class),
        (Split::Test, spec.test_per_class),
    ] {
        for label in 0..spec.num_classes {
            for i in 0..per_class {
                items.push(render_item(spec, split, label, i, stream)?);
                stream += 1;
            }
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        items,
        root: None,
    })
}

#[derive(Serialize, Deserialize)]
struct SidecarItem {
    image_id: String,
    split: Split,
    label: usize,
    image: String,
    gt_box: BBox,
    /// Object mask first, then distractors.
    masks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: SynthSpec,
    num_classes: usize,
    items: Vec<SidecarItem>,
}

fn file_stem(image_id: &str) -> String {
    image_id.replace('/', "_")
}

fn mask_to_gray(m: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

fn png_bytes<P: image::PixelWithColorType>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>) -> Result<Vec<u8>>
where
    [P::Subpixel]: image::EncodableLayout,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

impl SynthDataset {
    pub fn write(&mut self, root: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let stem = file_stem(&item.image_id);
            let image = format!("images/{stem}.png");
            write_atomic(&root.join(&image), &png_bytes(&item.image)?)?;
            let mut masks = Vec::new();
            for (k, m) in item.instance_masks().iter().enumerate() {
                let name = format!("masks/{stem}_{k}.png");
                write_atomic(&root.join(&name), &png_bytes(&mask_to_gray(m))?)?;
                masks.push(name);
            }
            entries.push(SidecarItem {
                image_id: item.image_id.clone(),
                split: item.split,
                label: item.label,
                image,
                gt_box: item.gt_box,
                masks,
            });
        }
        write_json(
            &root.join("synth.json"),
            &Sidecar {
                spec: self.spec.clone(),
                num_classes: self.spec.num_classes,
                items: entries,
            },
        )?;
        self.root = Some(root.to_path_buf());
        Ok(())
    }

    /// Records of one split. Paths are only meaningful once the corpus is on
    /// disk.
    pub fn dataset(&self, split: Split) -> Dataset {
        let root = self.root.clone().unwrap_or_default();
        Dataset {
            num_classes: self.spec.num_classes,
            records: self
                .items
                .iter()
                .filter(|i| i.split == split)
                .map(|i| Record {
                    image_id: i.image_id.clone(),
                    path: root.join(format!("images/{}.png", file_stem(&i.image_id))),
                    label: i.label,
                    gt_boxes: vec![i.gt_box],
                })
                .collect(),
        }
    }

    /// In-memory examples of one split, in item order.
    pub fn examples(&self, split: Split) -> Vec<Example> {
        self.items
            .iter()
            .filter(|i| i.split == split)
            .map(|i| Example {
                image_id: i.image_id.clone(),
                image: i.image.clone(),
                label: i.label,
                gt_boxes: vec![i.gt_box],
            })
            .collect()
    }

    /// Fake provider serving every image's instance masks in the eval frame
    /// of `cfg`.
    pub fn fake_provider(&self, cfg: &PreprocessConfig) -> Result<FakeProvider> {
        let mut instances = HashMap::new();
        for item in &self.items {
            let (w, h) = item.image.dimensions();
            let g = CropGeometry::new(cfg, w as usize, h as usize, PreprocessMode::Eval)?;
            instances.insert(
                item.image_id.clone(),
                item.instance_masks().iter().map(|m| g.apply_mask(m)).collect(),
            );
        }
        Ok(FakeProvider::new(instances))
    }

    /// SHA-256 over every image and mask, in item order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for item in &self.items {
            h.update(item.image_id.as_bytes());
            h.update(item.image.as_raw());
            for m in item.instance_masks() {
                h.update(m.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
            }
        }
        hex::encode(h.finalize())
    }
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::from_vec(
        h as usize,
        w as usize,
        img.pixels().map(|p| p[0] >= 128).collect(),
    )
}

pub fn load_synth(root: &Path) -> Result<SynthDataset> {
    let sidecar_path = root.join("synth.json");
    if !sidecar_path.exists() {
        return Err(Error::dataset(
            &sidecar_path,
            "synthetic corpus sidecar not found",
        ));
    }
    let sidecar: Sidecar = read_json(&sidecar_path)?;
    let mut items = Vec::with_capacity(sidecar.items.len());
    for e in sidecar.items {
        let image = image::open(root.join(&e.image))
            .map_err(|err| Error::dataset(root.join(&e.image), err.to_string()))?
            .to_rgb8();
        let mut masks = e
            .masks
            .iter()
            .map(|m| load_mask(&root.join(m)))
            .collect::<Result<Vec<_>>>()?;
        if masks.is_empty() {
            return Err(Error::dataset(
                &sidecar_path,
                format!("{} has no masks", e.image_id),
            ));
        }
        let object_mask = masks.remove(0);
        items.push(SynthItem {
            image_id: e.image_id,
            split: e.split,
            label: e.label,
            image,
            object_mask,
            distractor_masks: masks,
            gt_box: e.gt_box,
        });
    }
    Ok(SynthDataset {
        spec: sidecar.spec,
        items,
        root: Some(root.to_path_buf()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            canvas: 32,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn seed_stable_and_seed_sensitive() {
        let a = generate_synth(&small()).unwrap();
        let b = generate_synth(&small()).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = generate_synth(&SynthSpec { seed: 12, ..small() }).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn class_balanced() {
        let d = generate_synth(&small()).unwrap();
        for split in [Split::Train, Split::Test] {
            let ds = d.dataset(split);
            for c in 0..3 {
                let n = ds.records.iter().filter(|r| r.label == c).count();
                assert_eq!(n, if split == Split::Train { 4 } else { 2 });
            }
        }
    }

    #[test]
    fn box_is_tight_box_of_mask_and_distractors_are_disjoint() {
        let d = generate_synth(&SynthSpec {
            max_distractors: 3,
            ..small()
        })
        .unwrap();
        for item in &d.items {
            assert_eq!(bbox_from_mask(&item.object_mask).unwrap(), item.gt_box);
            for m in &item.distractor_masks {
                assert_eq!(item.object_mask.overlap_counts(m).unwrap().0, 0);
            }
        }
    }

    #[test]
    fn gray_ranges_are_validated_and_respected() {
        assert!(SynthSpec {
            background: (0.4, 0.2),
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            distractor_gray: (0.5, 1.5),
            ..small()
        }
        .validate()
        .is_err());
        let d = generate_synth(&SynthSpec {
            noise: 0.0,
            texture: 0.0,
            ..small()
        })
        .unwrap();
        for it in &d.items {
            let covered = it
                .distractor_masks
                .iter()
                .fold(it.object_mask.clone(), |a, m| a.union(m).unwrap());
            let (h, w) = covered.shape();
            let y = (0..h).find(|&y| (0..w).any(|x| !covered.get(y, x))).unwrap();
            let x = (0..w).find(|&x| !covered.get(y, x)).unwrap();
            let px = it.image.get_pixel(x as u32, y as u32);
            // background base plus a small tint
            assert!(
                px.0.iter().all(|&c| (c as f32) / 255.0 <= 0.3 + 0.05 + 1e-3),
                "{px:?}"
            );
        }
    }

    #[test]
    fn triangle_points_up() {
        let m = rasterize(ShapeKind::Triangle, 10, 0, 0, 10, 10);
        assert!(m.get(9, 0) && m.get(9, 9));
        assert!(!m.get(0, 0) && !m.get(0, 9));
        assert!(m.get(1, 5) || m.get(1, 4));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = generate_synth(&small()).unwrap();
        d.write(dir.path()).unwrap();
        let back = load_synth(dir.path()).unwrap();
        assert_eq!(back.digest(), d.digest());
        let rec = &back.dataset(Split::Test).records[0];
        assert!(rec.path.exists());
    }

    #[test]
    fn fake_provider_covers_every_image() {
        let d = generate_synth(&small()).unwrap();
        let cfg = PreprocessConfig {
            resize: 32,
            crop: 32,
            ..Default::default()
        };
        let p = d.fake_provider(&cfg).unwrap();
        assert_eq!(p.len(), d.items.len());
    }
}
