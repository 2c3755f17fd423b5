use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPromptConfig {
    pub grid_side: usize,
}

impl Default for GridPromptConfig {
    fn default() -> Self {
        Self { grid_side: 32 }
    }
}

/// A prompt point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
}

impl GridPoint {
    /// Pixel containing the point in an image of the given size.
    pub fn pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let y = ((self.y * height as f64) as usize).min(height.saturating_sub(1));
        let x = ((self.x * width as f64) as usize).min(width.saturating_sub(1));
        (y, x)
    }
}

/// Uniform `n × n` lattice with a half-cell margin, row-major: point
/// `(r, c)` sits at `((c + ½)/n, (r + ½)/n)`.
pub fn generate_grid_points(config: &GridPromptConfig) -> Result<Vec<GridPoint>> {
    let n = config.grid_side;
    if n == 0 {
        return Err(Error::Config("grid_side must be at least 1".into()));
    }
    let side = n as f64;
    Ok((0..n)
        .flat_map(|r| {
            (0..n).map(move |c| GridPoint {
                x: (c as f64 + 0.5) / side,
                y: (r as f64 + 0.5) / side,
            })
        })
        .collect())
}
