//! Deterministic synthetic road videos with exact ground truth.
//!
//! A [`SceneSpec`] fully determines a clip: lane tracks whose shape drifts
//! linearly over frames, occluders moving and scaling linearly, and the
//! texture noise seed. [`generate_video`] renders frames and the GT maps
//! `P̄`, `C̄`, `S̄`; [`overlay_occluder`] adds extra occluders to an existing
//! clip without touching its lane labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eigenlane::{EigenlaneBasis, LaneCurve};
use crate::error::{Error, Result};
use crate::geometry::LaneGeometry;
use crate::raster::{self, Raster};
use crate::rng;
use crate::tensor::Tensor;

/// Side length of a sprite patch.
pub const SPRITE_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneTrack {
    pub id: u32,
    /// Image x where the lane meets the bottom row at frame 0.
    pub bottom_x: f64,
    /// Horizontal drift of `bottom_x` per frame.
    pub drift: f64,
    /// Bow of the lane, as a fraction of the image width.
    pub curvature: f64,
    /// Change of `curvature` per frame.
    pub curvature_drift: f64,
    /// S-shaped cubic term, as a fraction of the image width.
    pub cubic: f64,
    /// Marking width at the bottom row, in pixels.
    pub marking_width: f64,
    pub brightness: f64,
    pub dashed: bool,
    /// Dash phase at frame 0 and its advance per frame (in dash periods).
    pub dash_phase: f64,
    pub dash_speed: f64,
}

/// Occluder patch: RGB plus a binary alpha, `SPRITE_SIZE²` texels row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub rgba: Vec<[f64; 4]>,
}

impl Sprite {
    /// Rounded rectangle of a base color with value-noise texture.
    pub fn procedural(rng: &mut ChaCha8Rng, color: [f64; 3], radius: f64, texture: f64) -> Self {
        let n = SPRITE_SIZE;
        let coarse: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rgba = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let dx = (radius - x).max(x - (n as f64 - radius)).max(0.0);
                let dy = (radius - y).max(y - (n as f64 - radius)).max(0.0);
                let inside = dx * dx + dy * dy <= radius * radius;
                let shade = texture * coarse[(r * 4 / n) * 4 + c * 4 / n] + rng.gen_range(-0.5..0.5) * texture;
                let px = color.map(|v| (v + shade).clamp(0.0, 1.0));
                rgba.push([px[0], px[1], px[2], if inside { 1.0 } else { 0.0 }]);
            }
        }
        Sprite { rgba }
    }

    fn texel(&self, u: f64, v: f64) -> Option<[f64; 4]> {
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return None;
        }
        let n = SPRITE_SIZE as f64;
        let (c, r) = ((u * n) as usize, (v * n) as usize);
        let t = self.rgba[r * SPRITE_SIZE + c];
        (t[3] > 0.0).then_some(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccluderTrack {
    pub id: u32,
    pub sprite: Sprite,
    /// Top-left corner `(x, y)` at frame 0.
    pub position0: (f64, f64),
    pub velocity: (f64, f64),
    /// `(width, height)` at frame 0.
    pub size0: (f64, f64),
    pub size_rate: (f64, f64),
}

/// Axis-aligned box `(x, y, width, height)` in image coordinates.
pub type Rect = (f64, f64, f64, f64);

impl OccluderTrack {
    pub fn rect(&self, t: usize) -> Rect {
        let t = t as f64;
        (
            self.position0.0 + self.velocity.0 * t,
            self.position0.1 + self.velocity.1 * t,
            self.size0.0 + self.size_rate.0 * t,
            self.size0.1 + self.size_rate.1 * t,
        )
    }

    fn texel(&self, t: usize, x: f64, y: f64) -> Option<[f64; 4]> {
        let (x0, y0, w, h) = self.rect(t);
        if w <= 0.0 || h <= 0.0 {
            return None;
        }
        self.sprite.texel((x - x0) / w, (y - y0) / h)
    }

    /// Whether the image point `(x, y)` lies in the footprint at frame `t`.
    pub fn covers(&self, t: usize, x: f64, y: f64) -> bool {
        self.texel(t, x, y).is_some()
    }

    pub fn min_size(&self, frames: usize) -> f64 {
        let last = frames.saturating_sub(1);
        let (_, _, w0, h0) = self.rect(0);
        let (_, _, w1, h1) = self.rect(last);
        w0.min(h0).min(w1).min(h1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub road: f64,
    /// Brightness change from the horizon to the bottom row.
    pub road_gradient: f64,
    pub sky: [f64; 3],
    /// Amplitude of per-pixel, per-frame noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub horizon: f64,
    pub vanish_x: f64,
    pub vanish_drift: f64,
    pub lanes: Vec<LaneTrack>,
    pub occluders: Vec<OccluderTrack>,
    pub texture: Texture,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Input("scene needs at least one frame".into()));
        }
        if !(0.0..(self.height as f64 - 1.0)).contains(&self.horizon) {
            return Err(Error::Input(format!("horizon {} outside image", self.horizon)));
        }
        for o in &self.occluders {
            if o.min_size(self.num_frames) <= 0.0 {
                return Err(Error::Input(format!("occluder {} shrinks to zero size", o.id)));
            }
        }
        Ok(())
    }

    fn depth(&self, y: f64) -> f64 {
        (y - self.horizon) / (self.height as f64 - 1.0 - self.horizon)
    }

    /// Image x of a lane at image row `y` in frame `t`.
    pub fn lane_x(&self, lane: &LaneTrack, t: usize, y: f64) -> f64 {
        let tf = t as f64;
        let v = self.depth(y);
        let vx = self.vanish_x + self.vanish_drift * tf;
        let bx = lane.bottom_x + lane.drift * tf;
        let w = self.width as f64;
        let bow = (lane.curvature + lane.curvature_drift * tf) * w * v * (1.0 - v);
        vx + (bx - vx) * v + bow + lane.cubic * w * v * (1.0 - v) * (v - 0.5)
    }

    /// Lane curves of frame `t` sampled at the geometry's rows, with track IDs.
    /// Lanes with no sample inside the image are dropped.
    pub fn lane_curves(&self, geom: &LaneGeometry, t: usize) -> Vec<(u32, LaneCurve)> {
        let mut out = Vec::new();
        for lane in &self.lanes {
            let xs: Vec<f64> = geom.rows.iter().map(|&y| self.lane_x(lane, t, y)).collect();
            match geom.valid_range(&xs) {
                Some(valid) if valid.1 > valid.0 => {
                    out.push((lane.id, LaneCurve { xs, valid }));
                }
                _ => log::warn!("lane track {} leaves the image in frame {t}; dropped", lane.id),
            }
        }
        out
    }
}

/// Lane on a GT frame with its track identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtLane {
    pub track_id: u32,
    pub curve: LaneCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `[1, H, W]` lane stripes.
    pub p: Tensor,
    /// `[M, H, W]` coefficients of the owning lane, zero off-lane.
    pub c: Tensor,
    /// `[1, H, W]` occluder coverage.
    pub s: Tensor,
    /// `[1, H, W]` index into `lanes` of the owning lane, `-1` off-lane.
    pub owner: Tensor,
    pub lanes: Vec<GtLane>,
}

impl GroundTruth {
    /// Flat grid pixels with `P̄ = 1` and their owning lane index.
    pub fn lane_pixels(&self) -> Vec<(usize, usize)> {
        self.owner
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &o)| o >= 0.0)
            .map(|(i, &o)| (i, o as usize))
            .collect()
    }
}

/// Render `P̄`, `C̄`, `S̄` on the output grid. Overlapping stripes go to the
/// horizontally nearest lane, ties to the lower index.
pub fn render_gt_maps(
    lanes: &[GtLane],
    covered: &dyn Fn(f64, f64) -> bool,
    basis: &EigenlaneBasis,
    geom: &LaneGeometry,
    stripe_width: f64,
) -> Result<GroundTruth> {
    if basis.n() != geom.n_rows() {
        return Err(Error::dim("render_gt_maps", format!("basis N = {}, geometry N = {}", basis.n(), geom.n_rows())));
    }
    let grid = Raster::grid(geom);
    let (h, w, m) = (grid.height, grid.width, basis.m());
    let mut owner = vec![-1.0; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    for (li, lane) in lanes.iter().enumerate() {
        let cols = raster::lane_columns(geom, &grid, &lane.curve.xs, lane.curve.valid);
        for (r, x) in cols.into_iter().enumerate() {
            let Some(x) = x else { continue };
            let Some((lo, hi)) = raster::span(x, stripe_width / 2.0, w) else {
                continue;
            };
            for c in lo..hi {
                let d = (c as f64 - x).abs();
                let q = r * w + c;
                if d < best[q] {
                    best[q] = d;
                    owner[q] = li as f64;
                }
            }
        }
    }
    let coeffs: Vec<Vec<f64>> = lanes
        .iter()
        .map(|l| basis.project(&l.curve))
        .collect::<Result<_>>()?;
    let mut c = Tensor::zeros(&[m, h, w]);
    let mut p = Tensor::zeros(&[1, h, w]);
    for (q, &o) in owner.iter().enumerate() {
        if o >= 0.0 {
            p.data_mut()[q] = 1.0;
            for (k, v) in coeffs[o as usize].iter().enumerate() {
                c.data_mut()[k * h * w + q] = *v;
            }
        }
    }
    let s = Tensor::from_fn(&[1, h, w], |q| {
        let (x, y) = (grid.col_center(q % w), grid.row_center(q / w));
        if covered(x, y) {
            1.0
        } else {
            0.0
        }
    });
    Ok(GroundTruth {
        p,
        c,
        s,
        owner: Tensor::new(&[1, h, w], owner)?,
        lanes: lanes.to_vec(),
    })
}

/// A rendered clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Tensor>,
    pub gts: Vec<GroundTruth>,
}

fn render_background(spec: &SceneSpec, t: usize) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut noise = rng::stream(spec.seed, "datagen:noise", &[t as u64]);
    let tex = &spec.texture;
    let mut img = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    let data = img.data_mut();
    for y in 0..h {
        let v = spec.depth(y as f64);
        for x in 0..w {
            let n: f64 = noise.gen_range(-1.0..1.0) * tex.noise;
            let q = y * w + x;
            if v < 0.0 {
                for ch in 0..3 {
                    data[ch * plane + q] = (tex.sky[ch] + 0.3 * n).clamp(0.0, 1.0);
                }
            } else {
                let g = (tex.road + tex.road_gradient * v + n).clamp(0.0, 1.0);
                for ch in 0..3 {
                    data[ch * plane + q] = g;
                }
            }
        }
    }
    for lane in &spec.lanes {
        draw_marking(spec, lane, t, &mut img);
    }
    img
}

fn draw_marking(spec: &SceneSpec, lane: &LaneTrack, t: usize, img: &mut Tensor) {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let first = spec.horizon.ceil().max(0.0) as usize;
    for y in first..h {
        let v = spec.depth(y as f64);
        if lane.dashed {
            // Dashes are evenly spaced in scene depth and move toward the camera.
            let depth = 1.0 / (v + 0.15);
            let phase = (depth * 1.2 + lane.dash_phase + lane.dash_speed * t as f64).rem_euclid(1.0);
            if phase >= 0.5 {
                continue;
            }
        }
        let cx = spec.lane_x(lane, t, y as f64);
        let half = 0.5 * lane.marking_width * (0.2 + 0.8 * v);
        let lo = (cx - half - 1.0).floor().max(0.0) as usize;
        let hi = ((cx + half + 1.0).ceil().max(0.0) as usize).min(w);
        for x in lo..hi {
            // Antialiased coverage of the pixel by the marking.
            let cover = ((half + 0.5) - (x as f64 - cx).abs()).clamp(0.0, 1.0);
            if cover > 0.0 {
                for ch in 0..3 {
                    let q = ch * plane + y * w + x;
                    img.data_mut()[q] += cover * (lane.brightness - img.data()[q]);
                }
            }
        }
    }
}

fn composite(track: &OccluderTrack, t: usize, img: &mut Tensor) {
    let (_, h, w) = img.chw().expect("frames are CHW");
    let plane = h * w;
    let (x0, y0, rw, rh) = track.rect(t);
    let ys = (y0.floor().max(0.0) as usize).min(h)..((y0 + rh).ceil().max(0.0) as usize).min(h);
    for y in ys {
        let xs = (x0.floor().max(0.0) as usize).min(w)..((x0 + rw).ceil().max(0.0) as usize).min(w);
        for x in xs {
            if let Some(px) = track.texel(t, x as f64, y as f64) {
                for ch in 0..3 {
                    img.data_mut()[ch * plane + y * w + x] = px[ch];
                }
            }
        }
    }
}

/// Render every frame of `spec` with its ground truth.
pub fn generate_video(spec: &SceneSpec, basis: &EigenlaneBasis, geom: &LaneGeometry, stripe_width: f64) -> Result<Video> {
    spec.validate()?;
    if (spec.height, spec.width) != (geom.image_height, geom.image_width) {
        return Err(Error::dim("generate_video", "scene and geometry resolutions differ"));
    }
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut gts = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut img = render_background(spec, t);
        for o in &spec.occluders {
            composite(o, t, &mut img);
        }
        let lanes: Vec<GtLane> = spec
            .lane_curves(geom, t)
            .into_iter()
            .map(|(track_id, curve)| GtLane { track_id, curve })
            .collect();
        let covered = |x: f64, y: f64| spec.occluders.iter().any(|o| o.covers(t, x, y));
        gts.push(render_gt_maps(&lanes, &covered, basis, geom, stripe_width)?);
        frames.push(img);
    }
    Ok(Video { frames, gts })
}

/// Composite an extra occluder over a clip. `S̄` gains the footprint; lane
/// labels are left as they are.
pub fn overlay_occluder(video: &mut Video, track: &OccluderTrack, geom: &LaneGeometry) -> Result<()> {
    if video.frames.len() != video.gts.len() {
        return Err(Error::Input("frame and GT counts differ".into()));
    }
    if track.min_size(video.frames.len()) <= 0.0 {
        return Err(Error::Input(format!("occluder {} shrinks to zero size", track.id)));
    }
    let grid = Raster::grid(geom);
    for (t, (img, gt)) in video.frames.iter_mut().zip(video.gts.iter_mut()).enumerate() {
        composite(track, t, img);
        for q in 0..grid.len() {
            let (x, y) = (grid.col_center(q % grid.width), grid.row_center(q / grid.width));
            if track.covers(t, x, y) {
                gt.s.data_mut()[q] = 1.0;
            }
        }
    }
    Ok(())
}

// --- random scene sampling ----------------------------------------------------

/// Ranges for random occluders, sizes as fractions of the image width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionProfile {
    pub min_count: usize,
    pub max_count: usize,
    pub min_width: f64,
    pub max_width: f64,
    /// Largest lateral speed, in image widths per frame.
    pub max_speed: f64,
    /// Start beside the image and drive in, instead of anywhere on the road.
    #[serde(default)]
    pub entering: bool,
}

impl OcclusionProfile {
    pub fn none() -> Self {
        OcclusionProfile {
            min_count: 0,
            max_count: 0,
            min_width: 0.1,
            max_width: 0.1,
            max_speed: 0.0,
            entering: false,
        }
    }

    /// Occasional small occluders.
    pub fn light() -> Self {
        OcclusionProfile {
            min_count: 0,
            max_count: 1,
            min_width: 0.08,
            max_width: 0.2,
            max_speed: 0.01,
            entering: false,
        }
    }

    /// Large occluders driving in from the sides and across the lanes.
    pub fn heavy() -> Self {
        OcclusionProfile {
            min_count: 2,
            max_count: 3,
            min_width: 0.25,
            max_width: 0.4,
            max_speed: 0.08,
            entering: true,
        }
    }

    /// Synthetic objects pasted during refinement training.
    pub fn augmentation() -> Self {
        OcclusionProfile {
            min_count: 1,
            max_count: 3,
            min_width: 0.15,
            max_width: 0.4,
            max_speed: 0.08,
            entering: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub occlusion: OcclusionProfile,
}

/// Random occluder placed over the road below the horizon.
pub fn sample_occluder(
    rng: &mut ChaCha8Rng,
    id: u32,
    height: usize,
    width: usize,
    horizon: f64,
    frames: usize,
    profile: &OcclusionProfile,
) -> OccluderTrack {
    let (hf, wf) = (height as f64, width as f64);
    let ow = rng.gen_range(profile.min_width..=profile.max_width) * wf;
    let oh = (ow * rng.gen_range(0.6..1.0)).min(0.9 * (hf - horizon));
    let bottom = rng.gen_range(horizon + 0.55 * (hf - horizon)..=hf + 0.1 * oh);
    let x = if profile.entering {
        if rng.gen_bool(0.5) {
            -ow * rng.gen_range(0.6..0.95)
        } else {
            wf - ow * rng.gen_range(0.05..0.4)
        }
    } else {
        rng.gen_range(-0.25 * ow..wf - 0.75 * ow)
    };
    // Occluders drift toward the image center so they sweep across lanes.
    let speed = profile.max_speed * wf * rng.gen_range(0.3..=1.0);
    let vx = if x + ow / 2.0 < wf / 2.0 { speed } else { -speed };
    // Growth is bounded so the box keeps a positive size over the clip.
    let grow = rng.gen_range(-0.2..0.5) * ow / frames.max(1) as f64;
    let dark = rng.gen_range(0.05..0.5);
    let tint: [f64; 3] = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    let color = tint.map(|c| (dark + c).min(1.0));
    let sprite = Sprite::procedural(rng, color, 3.0, 0.08);
    OccluderTrack {
        id,
        sprite,
        position0: (x, bottom - oh),
        velocity: (vx, 0.0),
        size0: (ow, oh),
        size_rate: (grow, grow * oh / ow),
    }
}

/// Draw a random scene from `rng`.
pub fn sample_scene(
    rng: &mut ChaCha8Rng,
    seed: u64,
    frames: usize,
    geom: &LaneGeometry,
    ranges: &SceneRanges,
) -> SceneSpec {
    let wf = geom.image_width as f64;
    let horizon = geom.rows[0];
    let n = rng.gen_range(ranges.min_lanes..=ranges.max_lanes);
    let spacing = rng.gen_range(0.32..0.45) * wf;
    let center = wf / 2.0 + rng.gen_range(-0.15..0.15) * wf;
    let ego = rng.gen_range(-0.004..0.004) * wf;
    let curvature = rng.gen_range(-0.12..0.12);
    let curvature_drift = rng.gen_range(-0.004..0.004);
    let cubic = rng.gen_range(-0.08..0.08);
    let dash_speed = rng.gen_range(0.05..0.2);
    let lanes = (0..n)
        .map(|j| LaneTrack {
            id: j as u32,
            bottom_x: center + (j as f64 - (n as f64 - 1.0) / 2.0) * spacing,
            drift: ego + rng.gen_range(-0.001..0.001) * wf,
            curvature: curvature + rng.gen_range(-0.01..0.01),
            curvature_drift,
            cubic,
            marking_width: rng.gen_range(3.5..5.5) * wf / 160.0,
            brightness: rng.gen_range(0.75..0.95),
            dashed: rng.gen_bool(0.5),
            dash_phase: rng.gen_range(0.0..1.0),
            dash_speed,
        })
        .collect();
    let occ = &ranges.occlusion;
    let count = rng.gen_range(occ.min_count..=occ.max_count);
    let occluders = (0..count)
        .map(|i| sample_occluder(rng, i as u32, geom.image_height, geom.image_width, horizon, frames, occ))
        .collect();
    let road = rng.gen_range(0.25..0.45);
    SceneSpec {
        seed,
        num_frames: frames,
        height: geom.image_height,
        width: geom.image_width,
        horizon,
        vanish_x: wf / 2.0 + rng.gen_range(-0.08..0.08) * wf,
        vanish_drift: rng.gen_range(-0.002..0.002) * wf,
        lanes,
        occluders,
        texture: Texture {
            road,
            road_gradient: rng.gen_range(-0.05..0.1),
            sky: [rng.gen_range(0.5..0.7), rng.gen_range(0.6..0.8), rng.gen_range(0.8..0.95)],
            noise: rng.gen_range(0.03..0.08),
        },
    }
}
