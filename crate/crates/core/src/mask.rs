use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer has {} entries, expected {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    /// Filled axis-aligned rectangle, half-open on the max edges.
    pub fn from_rect(height: usize, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::from_fn(height, width, |y, x| x >= x0 && x < x1 && y >= y0 && y < y1)
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "masks differ in shape: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    /// `(|a ∧ b|, |a ∨ b|)`.
    pub fn overlap_counts(&self, other: &Self) -> Result<(usize, usize)> {
        self.check_same_shape(other)?;
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok((inter, union))
    }

    /// Nearest-neighbour resampling (pixel-center convention).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            let sy = (((2 * y + 1) * self.height) / (2 * height)).min(self.height - 1);
            let sx = (((2 * x + 1) * self.width) / (2 * width)).min(self.width - 1);
            self.get(sy, sx)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Crop the half-open window `[x0, x0+width) × [y0, y0+height)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Self::from_fn(height, width, |y, x| self.get(y0 + y, x0 + x))
    }
}
