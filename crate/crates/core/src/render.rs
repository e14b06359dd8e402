//! Binary PPM output for frames, lane overlays, and intermediate maps.

use std::path::Path;

use crate::eigenlane::LaneCurve;
use crate::error::{Error, Result};
use crate::geometry::LaneGeometry;
use crate::io;
use crate::raster::{self, Raster};
use crate::tensor::Tensor;

/// Encode a `[3, H, W]` image with values in `[0, 1]` as binary PPM (P6).
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::dim("ppm", format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for q in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + q].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    io::write_bytes(path, &ppm_bytes(image)?)
}

/// Gray image of one channel of a map, rescaled to `[0, 1]` and enlarged by
/// pixel replication.
pub fn map_image(map: &Tensor, channel: usize, scale: usize) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    if channel >= c || scale == 0 {
        return Err(Error::dim("map_image", format!("channel {channel} of {c}, scale {scale}")));
    }
    let plane = map.channel(channel);
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (oh, ow) = (h * scale, w * scale);
    Ok(Tensor::from_fn(&[3, oh, ow], |i| {
        let q = i % (oh * ow);
        let (y, x) = (q / ow / scale, q % ow / scale);
        (plane[y * w + x] - lo) / span
    }))
}

/// Copy of `image` with lanes drawn in `color` as thin stripes.
pub fn overlay_lanes(image: &Tensor, geom: &LaneGeometry, lanes: &[&LaneCurve], color: [f64; 3]) -> Result<Tensor> {
    let mut out = image.clone();
    let (_, h, w) = out.chw()?;
    let r = Raster::image(geom);
    for lane in lanes {
        for q in raster::stripe_pixels(geom, &r, &lane.xs, lane.valid, 1.0) {
            for (ch, v) in color.iter().enumerate() {
                out.data_mut()[ch * h * w + q] = *v;
            }
        }
    }
    Ok(out)
}
