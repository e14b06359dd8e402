use serde::{Deserialize, Serialize};

use crate::eigenlane::{EigenlaneBasis, LaneCurve};
use crate::error::{Error, Result};
use crate::geometry::LaneGeometry;
use crate::raster::{self, Raster};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    /// Selection continues while the best remaining probability exceeds this.
    pub threshold: f64,
    pub max_lanes: usize,
    /// Suppression stripe half-width in pixels of a 160-column grid; scaled
    /// to the actual grid width.
    pub suppress_half_width: f64,
    /// Full width, in grid pixels, of the stripes rendered into `L`.
    pub render_width: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            threshold: 0.5,
            max_lanes: 8,
            suppress_half_width: 14.0,
            render_width: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedLane {
    pub curve: LaneCurve,
    pub score: f64,
    /// Grid `(row, col)` of the selected pixel.
    pub origin: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneMask {
    /// `[1, H, W]` binary map of rendered lanes.
    pub mask: Tensor,
    /// Selected lanes in decreasing score order.
    pub lanes: Vec<DecodedLane>,
}

/// Greedy lane selection over the probability map `p` (`[1, H, W]`) with
/// per-pixel coefficients `c` (`[M, H, W]`).
pub fn nms_decode(
    p: &Tensor,
    c: &Tensor,
    basis: &EigenlaneBasis,
    geom: &LaneGeometry,
    cfg: &NmsConfig,
) -> Result<LaneMask> {
    let (one, h, w) = p.chw()?;
    let (m, ch, cw) = c.chw()?;
    if one != 1 || (ch, cw) != (h, w) || m != basis.m() {
        return Err(Error::dim(
            "nms_decode",
            format!("P {:?}, C {:?}, basis M = {}", p.shape(), c.shape(), basis.m()),
        ));
    }
    if (h, w) != (geom.grid_height(), geom.grid_width()) || basis.n() != geom.n_rows() {
        return Err(Error::dim("nms_decode", "maps or basis do not match the lane geometry"));
    }
    let grid = Raster::grid(geom);
    let half = cfg.suppress_half_width * geom.width_scale();
    let scores = p.data();
    let mut live = vec![true; h * w];
    let mut lanes = Vec::new();
    for _ in 0..cfg.max_lanes {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if live[i] && best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        let Some(idx) = best.filter(|&i| scores[i] > cfg.threshold) else {
            break;
        };
        let coeff: Vec<f64> = (0..m).map(|k| c.data()[k * h * w + idx]).collect();
        let xs = basis.reconstruct(&coeff)?.xs;
        live[idx] = false;
        for q in raster::stripe_pixels(geom, &grid, &xs, (0, xs.len() - 1), half) {
            live[q] = false;
        }
        if let Some(valid) = geom.valid_range(&xs) {
            lanes.push(DecodedLane {
                curve: LaneCurve::new(xs, valid)?,
                score: scores[idx],
                origin: (idx / w, idx % w),
            });
        }
    }
    let mask = render_lane_mask(&lanes, geom, cfg.render_width)?;
    Ok(LaneMask { mask, lanes })
}

/// Binary `[1, H, W]` map with the selected lanes drawn as stripes.
pub fn render_lane_mask(lanes: &[DecodedLane], geom: &LaneGeometry, width: f64) -> Result<Tensor> {
    let grid = Raster::grid(geom);
    let mut mask = Tensor::zeros(&[1, grid.height, grid.width]);
    for lane in lanes {
        for q in raster::stripe_pixels(geom, &grid, &lane.curve.xs, lane.curve.valid, width / 2.0) {
            mask.data_mut()[q] = 1.0;
        }
    }
    Ok(mask)
}
