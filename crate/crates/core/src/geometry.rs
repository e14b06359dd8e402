//! Image/grid coordinate conventions for lane curves.
//!
//! A lane curve stores horizontal image coordinates at `N` fixed image rows,
//! spaced uniformly from the horizon row down to the bottom row. Pixel `i`
//! has its center at coordinate `i`. The output grid is the image downsampled
//! by `stride` with half-pixel-aligned centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid width of the reference configuration that pixel widths are quoted against.
pub const REFERENCE_GRID_WIDTH: f64 = 160.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub stride: usize,
    /// Image y coordinate of each sample row, strictly increasing.
    pub rows: Vec<f64>,
}

impl LaneGeometry {
    pub fn new(image_height: usize, image_width: usize, stride: usize, n_rows: usize, top: f64) -> Result<Self> {
        if n_rows < 2 {
            return Err(Error::Config("need at least two lane sample rows".into()));
        }
        if stride == 0 || image_height % stride != 0 || image_width % stride != 0 {
            return Err(Error::Config(format!(
                "image {image_height}x{image_width} not divisible by stride {stride}"
            )));
        }
        let bottom = (image_height - 1) as f64;
        if !(0.0..bottom).contains(&top) {
            return Err(Error::Config(format!("top row {top} outside image")));
        }
        let step = (bottom - top) / (n_rows - 1) as f64;
        let rows = (0..n_rows).map(|i| top + step * i as f64).collect();
        Ok(LaneGeometry {
            image_height,
            image_width,
            stride,
            rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.stride
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.stride
    }

    /// Grid width divided by the reference grid width; pixel widths quoted
    /// for the reference grid are multiplied by this.
    pub fn width_scale(&self) -> f64 {
        self.grid_width() as f64 / REFERENCE_GRID_WIDTH
    }

    /// Linearly interpolated x at image row `y`, if `y` lies within the sampled rows.
    pub fn x_at(&self, xs: &[f64], y: f64) -> Option<f64> {
        let (first, last) = (self.rows[0], *self.rows.last()?);
        if y < first || y > last {
            return None;
        }
        let step = (last - first) / (self.rows.len() - 1) as f64;
        let pos = (y - first) / step;
        let i = (pos.floor() as usize).min(self.rows.len() - 2);
        let t = pos - i as f64;
        Some(xs[i] * (1.0 - t) + xs[i + 1] * t)
    }

    /// Image y of the center of grid row `gy`.
    pub fn grid_row_center(&self, gy: usize) -> f64 {
        (gy as f64 + 0.5) * self.stride as f64 - 0.5
    }

    pub fn image_to_grid_x(&self, x: f64) -> f64 {
        (x + 0.5) / self.stride as f64 - 0.5
    }

    pub fn grid_to_image(&self, g: f64) -> f64 {
        (g + 0.5) * self.stride as f64 - 0.5
    }

    /// Grid x of a lane at grid row `gy`, if the row is inside the sampled span.
    pub fn lane_grid_x(&self, xs: &[f64], gy: usize) -> Option<f64> {
        self.x_at(xs, self.grid_row_center(gy))
            .map(|x| self.image_to_grid_x(x))
    }

    /// First and last sample rows whose x lies inside the image.
    pub fn valid_range(&self, xs: &[f64]) -> Option<(usize, usize)> {
        let max_x = (self.image_width - 1) as f64;
        let inside = |x: &f64| (0.0..=max_x).contains(x);
        let first = xs.iter().position(inside)?;
        let last = xs.iter().rposition(inside)?;
        Some((first, last))
    }
}
