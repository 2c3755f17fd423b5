//! Localization overlays: the foreground map as a color wash, the selected
//! mask outline, ground-truth boxes in red and the predicted box in green.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::eval_metrics::BBox;
use crate::io::write_atomic;
use crate::{BinaryMask, HeatMap, Result};

pub const GT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const CONTOUR_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
const MAP_ALPHA: f32 = 0.45;

/// Blue → cyan → yellow → red ramp.
fn ramp(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let s = v * 3.0;
    let i = (s.floor() as usize).min(2);
    let f = s - i as f32;
    std::array::from_fn(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>, thickness: u32) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let x0 = (b.x_min.max(0.0) as u32).min(w - 1);
    let y0 = (b.y_min.max(0.0) as u32).min(h - 1);
    let x1 = ((b.x_max.ceil() as i64 - 1).max(0) as u32).min(w - 1);
    let y1 = ((b.y_max.ceil() as i64 - 1).max(0) as u32).min(h - 1);
    for t in 0..thickness {
        for x in x0..=x1 {
            for y in [y0.saturating_add(t).min(h - 1), y1.saturating_sub(t)] {
                img.put_pixel(x, y, color);
            }
        }
        for y in y0..=y1 {
            for x in [x0.saturating_add(t).min(w - 1), x1.saturating_sub(t)] {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Pixels of `mask` with at least one 4-neighbor outside it (image border
/// counts as outside).
pub fn contour(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1))
    })
}

/// Composes the overlay at the image resolution.
pub fn render_overlay(
    image: &RgbImage,
    map: Option<&HeatMap>,
    mask: Option<&BinaryMask>,
    gt_boxes: &[BBox],
    predicted: Option<&BBox>,
) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut out = image.clone();
    if let Some(map) = map {
        let up = map.resize_bilinear(h as usize, w as usize);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let c = ramp(up.get(y as usize, x as usize));
            for k in 0..3 {
                let v = px[k] as f32 * (1.0 - MAP_ALPHA) + c[k] * 255.0 * MAP_ALPHA;
                px[k] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    if let Some(mask) = mask {
        let m = if mask.shape() == (h as usize, w as usize) {
            mask.clone()
        } else {
            mask.resize_nearest(h as usize, w as usize)
        };
        let edge = contour(&m);
        for y in 0..h as usize {
            for x in 0..w as usize {
                if edge.get(y, x) {
                    out.put_pixel(x as u32, y as u32, CONTOUR_COLOR);
                }
            }
        }
    }
    let thickness = (w.min(h) / 112).max(1);
    for b in gt_boxes {
        draw_box(&mut out, b, GT_COLOR, thickness);
    }
    if let Some(b) = predicted {
        draw_box(&mut out, b, PRED_COLOR, thickness);
    }
    out
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png)?;
    write_atomic(path, &buf.into_inner())
}
