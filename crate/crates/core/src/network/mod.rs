//! Intra-frame network: encoder, probability and coefficient decoders, the
//! latent obstacle head, and NMS lane decoding.

mod nms;

pub use nms::{nms_decode, render_lane_mask, DecodedLane, LaneMask, NmsConfig};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::LaneGeometry;
use crate::kernels::norm::BN_MOMENTUM;
use crate::omr::OmrConfig;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// Output grid stride relative to the input image.
pub const GRID_STRIDE: usize = 4;
/// Side of the deformable coefficient kernel.
pub const DEFORM_KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Feature channels `K`.
    pub k: usize,
    /// Eigenlane coefficients `M`.
    pub m: usize,
    /// Lane sample rows `N`.
    pub n_rows: usize,
    /// Image y of the first lane sample row.
    pub horizon: f64,
    /// Channel widths of the stem and the four backbone stages.
    pub backbone: [usize; 5],
    /// Strict threshold on `S` for the obstacle mask.
    pub obstacle_threshold: f64,
    pub nms: NmsConfig,
    pub omr: OmrConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            image_height: 96,
            image_width: 160,
            k: 16,
            m: 6,
            n_rows: 36,
            horizon: 30.0,
            backbone: [8, 12, 16, 24, 32],
            obstacle_threshold: 0.3,
            nms: NmsConfig::default(),
            omr: OmrConfig::default(),
        }
    }

    /// Full-scale shapes: 384×640 input, 64 channels on a 96×160 grid.
    pub fn full_scale() -> Self {
        ModelConfig {
            image_height: 384,
            image_width: 640,
            k: 64,
            horizon: 120.0,
            backbone: [32, 64, 128, 256, 512],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height % 32 != 0 || self.image_width % 32 != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of 32",
                self.image_height, self.image_width
            )));
        }
        if self.k == 0 || self.k % 4 != 0 {
            return Err(Error::Config(format!("K = {} must be a positive multiple of 4", self.k)));
        }
        if self.m == 0 || self.m > self.n_rows {
            return Err(Error::Config(format!("M = {} must lie in 1..=N ({})", self.m, self.n_rows)));
        }
        if self.backbone.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        self.geometry().map(|_| ())
    }

    pub fn geometry(&self) -> Result<LaneGeometry> {
        LaneGeometry::new(self.image_height, self.image_width, GRID_STRIDE, self.n_rows, self.horizon)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / GRID_STRIDE, self.image_width / GRID_STRIDE)
    }
}

/// Batch norm uses batch statistics in `Train` and running statistics in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter-name prefixes of the modules trained in step 1.
pub const INTRA_FRAME_PREFIXES: [&str; 3] = ["enc.", "dec.", "obs."];

// --- parameter construction --------------------------------------------------

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        // Keyed by name so adding a layer never reshuffles the others.
        let mut r2 = rng::stream(self.seed, &format!("init:{name}"), &[]);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut r2));
        self.store.insert(name, t)
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, gain: f64, bias: Option<f64>) -> Result<()> {
        let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
        if std == 0.0 {
            self.store.insert(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k]))?;
        } else {
            self.normal(&format!("{name}.w"), &[c_out, c_in, k, k], std)?;
        }
        if let Some(b) = bias {
            self.store.insert(format!("{name}.b"), Tensor::full(&[c_out], b))?;
        }
        Ok(())
    }

    pub fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        self.conv(name, c_in, c_out, k, 1.0, None)?;
        self.store.insert(format!("{name}.gamma"), Tensor::ones(&[c_out]))?;
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[c_out]))?;
        self.store.set_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c_out]));
        self.store.set_buffer(format!("{name}.running_var"), Tensor::ones(&[c_out]));
        Ok(())
    }
}

/// Initialize every intra-frame and OMR parameter for `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        seed,
    };
    let b = cfg.backbone;
    let k = cfg.k;
    init.conv_bn("enc.stem", 3, b[0], 3)?;
    for s in 0..4 {
        init.conv_bn(&format!("enc.stage{s}.down"), b[s], b[s + 1], 3)?;
        init.conv_bn(&format!("enc.stage{s}.conv"), b[s + 1], b[s + 1], 3)?;
    }
    for (i, &c) in b[2..].iter().enumerate() {
        init.conv(&format!("enc.proj{i}"), c, k, 1, 1.0, Some(0.0))?;
    }
    init.conv_bn("enc.fuse", 3 * k, k, 3)?;
    init.conv("enc.out", k, k, 3, 1.0, Some(0.0))?;

    for head in ["dec.prob", "obs"] {
        init.conv_bn(&format!("{head}.conv0"), k, k, 3)?;
        init.conv_bn(&format!("{head}.conv1"), k, k, 3)?;
        init.conv(&format!("{head}.out"), k, 1, 1, 0.1, Some(-2.0))?;
    }

    let taps = DEFORM_KERNEL * DEFORM_KERNEL;
    // Zero offsets and unit modulation at initialization: the deformable
    // layer starts as a plain 5x5 convolution.
    init.conv("dec.coeff.offset", k, 2 * taps, 3, 0.0, Some(0.0))?;
    init.conv("dec.coeff.modulation", k, taps, 3, 0.0, Some(0.0))?;
    init.conv_bn("dec.coeff.transform", k, k, 3)?;
    init.conv("dec.coeff.deform", k, cfg.m, DEFORM_KERNEL, 0.5, Some(0.0))?;
    init.store.set_buffer("dec.coeff.scale", Tensor::ones(&[cfg.m]));
    init.store.set_buffer("dec.coeff.shift", Tensor::zeros(&[cfg.m]));

    crate::omr::init_params(&mut init, cfg)?;
    Ok(store)
}

/// Fold training-mode batch statistics into the running estimates.
pub fn fold_batch_stats(store: &mut ParamStore, stats: &[BatchStats]) -> Result<()> {
    for s in stats {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let key = format!("{}.{suffix}", s.name);
            let mut run = store
                .buffer(&key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing buffer {key}")))?;
            let scale = if suffix == "running_var" { unbias } else { 1.0 };
            for (r, b) in run.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * scale;
            }
            store.set_buffer(key, run);
        }
    }
    Ok(())
}

/// Sinusoidal positional bias `B` of shape `[K, H, W]`: the first `K/2`
/// channels encode the row, the rest the column, as interleaved sin/cos
/// pairs with frequencies `10000^(-2i/(K/2))`.
pub fn positional_bias(h: usize, w: usize, k: usize) -> Result<Tensor> {
    if k == 0 || k % 4 != 0 {
        return Err(Error::Config(format!("positional bias needs K divisible by 4, got {k}")));
    }
    let half = k / 2;
    let mut out = Tensor::zeros(&[k, h, w]);
    let data = out.data_mut();
    for i in 0..half / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / half as f64);
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = (y as f64 * freq, x as f64 * freq);
                let p = y * w + x;
                data[(2 * i) * h * w + p] = ry.sin();
                data[(2 * i + 1) * h * w + p] = ry.cos();
                data[(half + 2 * i) * h * w + p] = rx.sin();
                data[(half + 2 * i + 1) * h * w + p] = rx.cos();
            }
        }
    }
    Ok(out)
}

/// Binary obstacle mask: `O(x) = 1` iff `S(x) > threshold`.
pub fn obstacle_mask(s: &Tensor, threshold: f64) -> Tensor {
    s.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

// --- forward ------------------------------------------------------------------

/// Forward builder over a parameter store.
pub struct Network<'a> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParamStore,
    pub mode: Mode,
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore, mode: Mode) -> Self {
        Network { cfg, store, mode }
    }

    pub(crate) fn conv(&self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = tape.param(self.store, &format!("{name}.w"))?;
        let k = tape.value(w).shape()[2];
        let bias_name = format!("{name}.b");
        let b = match self.store.get(&bias_name) {
            Some(_) => Some(tape.param(self.store, &bias_name)?),
            None => None,
        };
        tape.conv2d(x, w, b, stride, k / 2)
    }

    pub(crate) fn conv_bn_relu(&self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(tape, name, x, stride)?;
        let gamma = tape.param(self.store, &format!("{name}.gamma"))?;
        let beta = tape.param(self.store, &format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => tape.batchnorm_relu(y, gamma, beta, None, true, name),
            Mode::Eval => {
                let mean = self.buffer(&format!("{name}.running_mean"))?;
                let var = self.buffer(&format!("{name}.running_var"))?;
                tape.batchnorm_relu(y, gamma, beta, Some((mean.data(), var.data())), false, name)
            }
        }
    }

    fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.store
            .buffer(name)
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))
    }

    /// Image `[3, H0, W0]` to the feature map `F̃` of shape `[K, H0/4, W0/4]`.
    pub fn encode(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        if shape != [3, self.cfg.image_height, self.cfg.image_width] {
            return Err(Error::Config(format!(
                "image shape {shape:?} does not match configured [3, {}, {}]",
                self.cfg.image_height, self.cfg.image_width
            )));
        }
        let mut x = self.conv_bn_relu(tape, "enc.stem", image, 2)?;
        let mut scales = Vec::with_capacity(3);
        for s in 0..4 {
            x = self.conv_bn_relu(tape, &format!("enc.stage{s}.down"), x, 2)?;
            x = self.conv_bn_relu(tape, &format!("enc.stage{s}.conv"), x, 1)?;
            if s >= 1 {
                scales.push(x);
            }
        }
        let (h8, w8) = (self.cfg.image_height / 8, self.cfg.image_width / 8);
        let mut parts = Vec::with_capacity(3);
        for (i, &s) in scales.iter().enumerate() {
            let p = self.conv(tape, &format!("enc.proj{i}"), s, 1)?;
            parts.push(if i == 0 { p } else { tape.resize_bilinear(p, h8, w8)? });
        }
        let cat = tape.concat(&parts)?;
        let fused = self.conv_bn_relu(tape, "enc.fuse", cat, 1)?;
        let (gh, gw) = self.cfg.grid();
        let up = tape.resize_bilinear(fused, gh, gw)?;
        self.conv(tape, "enc.out", up, 1)
    }

    fn head(&self, tape: &mut Tape, name: &str, f: Var) -> Result<Var> {
        let x = self.conv_bn_relu(tape, &format!("{name}.conv0"), f, 1)?;
        let x = self.conv_bn_relu(tape, &format!("{name}.conv1"), x, 1)?;
        let logit = self.conv(tape, &format!("{name}.out"), x, 1)?;
        Ok(tape.sigmoid(logit))
    }

    /// Lane probability map `P` of shape `[1, H, W]`.
    pub fn decode_prob(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        self.head(tape, "dec.prob", f)
    }

    /// Obstacle probability map `S = σ(w1(F))`.
    pub fn detect_obstacles(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        self.head(tape, "obs", f)
    }

    /// Coefficient map `C` of shape `[M, H, W]`, with the intermediate
    /// offset (`E¹`) and modulation (`E²`) maps.
    pub fn decode_coeff_maps(&self, tape: &mut Tape, f: Var) -> Result<CoeffMaps> {
        let (k, h, w) = tape.value(f).chw()?;
        let bias = tape.constant(positional_bias(h, w, k)?);
        let g = tape.add(f, bias)?;
        let offsets = self.conv(tape, "dec.coeff.offset", g, 1)?;
        let m_logit = self.conv(tape, "dec.coeff.modulation", g, 1)?;
        let m_sig = tape.sigmoid(m_logit);
        // 2σ(0) = 1: unit modulation at zero pre-activation.
        let modulation = tape.scale(m_sig, 2.0);
        let transformed = self.conv_bn_relu(tape, "dec.coeff.transform", g, 1)?;
        let kernel = tape.param(self.store, "dec.coeff.deform.w")?;
        let kb = tape.param(self.store, "dec.coeff.deform.b")?;
        let raw = tape.deform_conv(transformed, offsets, modulation, kernel, Some(kb))?;
        let scale = self.buffer("dec.coeff.scale")?;
        let shift = self.buffer("dec.coeff.shift")?;
        let coeff = tape.channel_affine(raw, scale.data(), shift.data())?;
        Ok(CoeffMaps {
            coeff,
            offsets,
            modulation,
            transformed,
        })
    }

    pub fn decode_coeff(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        Ok(self.decode_coeff_maps(tape, f)?.coeff)
    }

    /// Encoder plus obstacle head: `(F̃, S)`.
    pub fn intra_features(&self, tape: &mut Tape, image: Var) -> Result<(Var, Var)> {
        let f = self.encode(tape, image)?;
        let s = self.detect_obstacles(tape, f)?;
        Ok((f, s))
    }
}

pub struct CoeffMaps {
    pub coeff: Var,
    pub offsets: Var,
    pub modulation: Var,
    pub transformed: Var,
}

/// Set the fixed per-channel affine map applied to the raw deformable output,
/// so that unit-scale outputs span the training coefficients.
pub fn set_coefficient_normalization(store: &mut ParamStore, mean: &[f64], std: &[f64]) -> Result<()> {
    let m = store
        .buffer("dec.coeff.scale")
        .map(Tensor::len)
        .ok_or_else(|| Error::Config("missing coefficient buffers".into()))?;
    if mean.len() != m || std.len() != m {
        return Err(Error::dim("coefficient normalization", format!("{m} channels")));
    }
    store.set_buffer("dec.coeff.scale", Tensor::new(&[m], std.to_vec())?);
    store.set_buffer("dec.coeff.shift", Tensor::new(&[m], mean.to_vec())?);
    Ok(())
}
