use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{BinaryMask, Error, Result};

/// Row-major single-channel real-valued map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl HeatMap {
    pub fn from_vec(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "map buffer has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f32 {
        self.values.iter().sum::<f32>() / self.values.len() as f32
    }

    /// `value >= threshold` per pixel.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask::from_vec(
            self.height,
            self.width,
            self.values.iter().map(|&v| v >= threshold).collect(),
        )
        .expect("same shape")
    }

    /// Bilinear resampling, half-pixel centers, edge clamped.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let taps = |dst: usize, scale: f32, len: usize| {
            let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f32)
        };
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let ys: Vec<_> = (0..height).map(|y| taps(y, sy, self.height)).collect();
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        Self::from_fn(height, width, |y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    /// Stores probabilities as 16-bit grayscale, `round(p · 65535)`.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u16> = self
            .values
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            pixels,
        )
        .ok_or_else(|| Error::Shape("map buffer does not fit image".into()))?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        crate::io::write_atomic(path, &buf.into_inner())
    }

    pub fn load_png16(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let values = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        Self::from_vec(h as usize, w as usize, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_round_trip_quantizes_to_1_over_65535() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let map = HeatMap::from_fn(5, 7, |y, x| ((y * 7 + x) as f32 / 34.0).min(1.0));
        map.save_png16(&path).unwrap();
        let back = HeatMap::load_png16(&path).unwrap();
        assert_eq!(back.shape(), (5, 7));
        for (a, b) in map.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let map = HeatMap::filled(3, 4, 0.25);
        let up = map.resize_bilinear(12, 16);
        assert!(up.values().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
