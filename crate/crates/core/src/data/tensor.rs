use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Channel-first 3-channel float image, row-major within each plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear resampling with half-pixel centers and edge clamping (no
    /// antialiasing), the usual `align_corners = false` convention.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let taps = |dst: usize, scale: f32, len: usize| {
            let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f32)
        };
        let ys: Vec<_> = (0..height).map(|y| taps(y, sy, self.height)).collect();
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        Self::from_fn(height, width, |c, y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    /// Mean over non-overlapping `factor × factor` cells.
    pub fn area_downsample(&self, factor: usize) -> Self {
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f32;
        Self::from_fn(h, w, |c, y, x| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(c, y * factor + dy, x * factor + dx);
                }
            }
            acc / norm
        })
    }
}
