//! Lane stripe rasterization, shared by GT rendering, NMS suppression, the
//! rendered lane mask, and the stripe IoU metric.

use crate::geometry::LaneGeometry;

/// A raster whose pixel `(r, c)` is centered at image coordinate
/// `((c + 0.5)·scale − 0.5, (r + 0.5)·scale − 0.5)`. Scale 1 is the image
/// itself; the network's output grid uses the geometry's stride.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub scale: f64,
}

impl Raster {
    pub fn image(geom: &LaneGeometry) -> Self {
        Raster {
            height: geom.image_height,
            width: geom.image_width,
            scale: 1.0,
        }
    }

    pub fn grid(geom: &LaneGeometry) -> Self {
        Raster {
            height: geom.grid_height(),
            width: geom.grid_width(),
            scale: geom.stride as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_center(&self, r: usize) -> f64 {
        (r as f64 + 0.5) * self.scale - 0.5
    }

    pub fn col_center(&self, c: usize) -> f64 {
        self.row_center(c)
    }

    pub fn to_raster_x(&self, image_x: f64) -> f64 {
        (image_x + 0.5) / self.scale - 0.5
    }
}

/// Lane x (in raster columns) at each raster row inside the lane's valid span.
pub fn lane_columns(geom: &LaneGeometry, raster: &Raster, xs: &[f64], valid: (usize, usize)) -> Vec<Option<f64>> {
    let (top, bottom) = (geom.rows[valid.0], geom.rows[valid.1]);
    (0..raster.height)
        .map(|r| {
            let y = raster.row_center(r);
            if y < top || y > bottom {
                return None;
            }
            geom.x_at(xs, y).map(|x| raster.to_raster_x(x))
        })
        .collect()
}

/// Column span `[lo, hi)` of pixels within `half_width` (inclusive) of `x`.
pub fn span(x: f64, half_width: f64, width: usize) -> Option<(usize, usize)> {
    let lo = (x - half_width).ceil().max(0.0);
    let hi = (x + half_width).floor().min(width as f64 - 1.0);
    if hi < lo {
        return None;
    }
    Some((lo as usize, hi as usize + 1))
}

/// Flat indices of the stripe pixels, in row-major order.
pub fn stripe_pixels(
    geom: &LaneGeometry,
    raster: &Raster,
    xs: &[f64],
    valid: (usize, usize),
    half_width: f64,
) -> Vec<usize> {
    let mut out = Vec::new();
    for (r, x) in lane_columns(geom, raster, xs, valid).into_iter().enumerate() {
        if let Some((lo, hi)) = x.and_then(|x| span(x, half_width, raster.width)) {
            out.extend((lo..hi).map(|c| r * raster.width + c));
        }
    }
    out
}

/// Boolean stripe mask over the whole raster.
pub fn stripe_mask(
    geom: &LaneGeometry,
    raster: &Raster,
    xs: &[f64],
    valid: (usize, usize),
    half_width: f64,
) -> Vec<bool> {
    let mut mask = vec![false; raster.len()];
    for p in stripe_pixels(geom, raster, xs, valid, half_width) {
        mask[p] = true;
    }
    mask
}
