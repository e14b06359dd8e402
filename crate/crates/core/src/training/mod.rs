//! Two-step training: the intra-frame network first (encoder, decoders,
//! obstacle head), then the refinement module over unrolled clips with
//! everything else frozen.

pub mod loss;
pub mod optim;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{Clip, Dataset, Split};
use crate::eigenlane::EigenlaneBasis;
use crate::error::{Error, Result};
use crate::geometry::LaneGeometry;
use crate::network::{self, Mode, ModelConfig, Network, INTRA_FRAME_PREFIXES};
use crate::omr::{self, CarriedState, RecurrentState, StageTimes, StateVars};
use crate::params::ParamStore;
use crate::rng;
use crate::scenegen::{self, GroundTruth, OcclusionProfile, Video};
use crate::tensor::Tensor;

use loss::{FocalConfig, LaneTarget};
use optim::{AdamW, AdamWConfig, StepOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    /// Frames per optimizer step in step 1.
    pub batch_size: usize,
    /// Frames per truncated-backprop window in step 2.
    pub tbptt: usize,
    /// Paste synthetic occluders into step-2 clips.
    pub augment: bool,
    /// In step 1, paste fresh occluders into a copy of each selected clip
    /// every epoch and supervise the obstacle head on that copy.
    pub step1_augment: bool,
    pub augment_prob: f64,
    pub augmentation: OcclusionProfile,
    pub focal: FocalConfig,
    /// LIoU half-extension in image pixels at 640 columns; scaled to the
    /// actual image width.
    pub liou_extension: f64,
    pub step1_optimizer: AdamWConfig,
    pub step2_optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            step1_epochs: 24,
            step2_epochs: 6,
            batch_size: 4,
            tbptt: 4,
            augment: true,
            step1_augment: true,
            augment_prob: 0.5,
            augmentation: OcclusionProfile::augmentation(),
            focal: FocalConfig::default(),
            liou_extension: 15.0,
            step1_optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            // 96 steps is two epochs of 4-frame windows on the desk split.
            step2_optimizer: AdamWConfig {
                schedule: optim::Schedule::Step { every: 96, times: 3 },
                ..AdamWConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.tbptt == 0 {
            return Err(Error::Config("batch size and TBPTT window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::Config(format!("augmentation probability {} outside [0, 1]", self.augment_prob)));
        }
        if self.liou_extension <= 0.0 {
            return Err(Error::Config("LIoU extension must be positive".into()));
        }
        Ok(())
    }

    /// LIoU extension in pixels of `geom`'s image.
    pub fn extension(&self, geom: &LaneGeometry) -> f64 {
        self.liou_extension * geom.width_scale()
    }
}

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: String,
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub cls_p: f64,
    pub reg_c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_s: Option<f64>,
    /// `cls_p + reg_c (+ cls_s)`, summed in that order.
    pub total: f64,
    pub lr: f64,
    pub skipped: bool,
}

impl LossReport {
    fn new(stage: &str, epoch: usize, batch: usize, sums: [f64; 3], count: usize, with_s: bool) -> Self {
        let n = count as f64;
        let (cls_p, reg_c) = (sums[0] / n, sums[1] / n);
        let cls_s = with_s.then(|| sums[2] / n);
        LossReport {
            stage: stage.into(),
            epoch,
            batch,
            step: 0,
            cls_p,
            reg_c,
            cls_s,
            total: total_of(cls_p, reg_c, cls_s),
            lr: 0.0,
            skipped: false,
        }
    }

    /// Whether `total` is exactly the sum of the components.
    pub fn is_consistent(&self) -> bool {
        self.total == total_of(self.cls_p, self.reg_c, self.cls_s)
    }
}

fn total_of(cls_p: f64, reg_c: f64, cls_s: Option<f64>) -> f64 {
    match cls_s {
        Some(s) => cls_p + reg_c + s,
        None => cls_p + reg_c,
    }
}

/// Regression loss of the coefficient map against the GT lanes at every
/// GT lane pixel: LIoU between `U·C(x)` and `U·C̄(x)` over the lane's rows.
pub fn regression_loss(
    tape: &mut Tape,
    coeff: Var,
    gt: &GroundTruth,
    basis: &EigenlaneBasis,
    extension: f64,
) -> Result<Option<Var>> {
    let pixels = gt.lane_pixels();
    if pixels.is_empty() {
        return Ok(None);
    }
    let targets_per_lane: Vec<LaneTarget> = gt
        .lanes
        .iter()
        .map(|l| {
            let xs = basis.reconstruct(&basis.project(&l.curve)?)?.xs;
            Ok(LaneTarget {
                xs,
                rows: Some(l.curve.valid),
            })
        })
        .collect::<Result<_>>()?;
    let idx: Vec<usize> = pixels.iter().map(|&(q, _)| q).collect();
    let targets = pixels.iter().map(|&(_, o)| targets_per_lane[o].clone()).collect();
    let gathered = tape.gather_pixels(coeff, &idx)?;
    let ut = tape.constant(basis.transposed_tensor());
    let curves = tape.matmul(gathered, ut)?;
    loss::liou_loss(tape, curves, targets, extension).map(Some)
}

/// Sum `terms` on the tape.
fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Parameters, optimizer, and progress of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub epochs_done: usize,
}

/// Per-channel mean and standard deviation of the GT coefficients of every
/// training lane.
pub fn coefficient_stats(ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = ds.basis.m();
    let mut coeffs = Vec::new();
    for clip in ds.split(Split::Train) {
        for gt in &clip.video.gts {
            for l in &gt.lanes {
                coeffs.push(ds.basis.project(&l.curve)?);
            }
        }
    }
    if coeffs.is_empty() {
        return Err(Error::Input("training split has no lanes".into()));
    }
    let n = coeffs.len() as f64;
    let mean: Vec<f64> = (0..m).map(|k| coeffs.iter().map(|c| c[k]).sum::<f64>() / n).collect();
    let std = (0..m)
        .map(|k| {
            let var = coeffs.iter().map(|c| (c[k] - mean[k]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-3)
        })
        .collect();
    Ok((mean, std))
}

pub fn check_compatible(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    let d = &ds.config;
    if (d.image_height, d.image_width, d.n_rows, d.m) != (model.image_height, model.image_width, model.n_rows, model.m)
        || d.horizon != model.horizon
    {
        return Err(Error::Incompatible(format!(
            "model expects {}x{} images with N={}, M={}, horizon {}; dataset has {}x{}, N={}, M={}, horizon {}",
            model.image_height,
            model.image_width,
            model.n_rows,
            model.m,
            model.horizon,
            d.image_height,
            d.image_width,
            d.n_rows,
            d.m,
            d.horizon
        )));
    }
    Ok(())
}

// --- step 1 -----------------------------------------------------------------------

pub fn init_step1(model: &ModelConfig, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    check_compatible(model, ds)?;
    let mut store = network::init_params(model, cfg.seed)?;
    let (mean, std) = coefficient_stats(ds)?;
    network::set_coefficient_normalization(&mut store, &mean, &std)?;
    Ok(TrainState {
        store,
        optimizer: AdamW::new(cfg.step1_optimizer.clone()),
        epochs_done: 0,
    })
}

/// Intra-frame losses `(cls(P̃), reg(C̃), cls(S̃))` of one frame, recorded on `tape`.
pub fn step1_frame_loss(
    net: &Network,
    tape: &mut Tape,
    image: &Tensor,
    gt: &GroundTruth,
    basis: &EigenlaneBasis,
    cfg: &TrainConfig,
    geom: &LaneGeometry,
) -> Result<[Var; 3]> {
    let x = tape.constant(image.clone());
    let f = net.encode(tape, x)?;
    let p = net.decode_prob(tape, f)?;
    let coeff = net.decode_coeff(tape, f)?;
    let s = net.detect_obstacles(tape, f)?;
    let cls_p = loss::focal_loss(tape, p, &gt.p, &cfg.focal)?;
    let reg = match regression_loss(tape, coeff, gt, basis, cfg.extension(geom))? {
        Some(r) => r,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let cls_s = loss::focal_loss(tape, s, &gt.s, &cfg.focal)?;
    Ok([cls_p, reg, cls_s])
}

/// One epoch of step 1. Appends one report per optimizer step to `log` and
/// returns the epoch's mean total loss.
pub fn step1_epoch(
    state: &mut TrainState,
    model: &ModelConfig,
    ds: &Dataset,
    cfg: &TrainConfig,
    log: &mut Vec<LossReport>,
) -> Result<f64> {
    let geom = model.geometry()?;
    let epoch = state.epochs_done;
    // Pasted occluders only supervise the obstacle head; the lane terms
    // always come from the unmodified frame.
    let mut pasted: Vec<Option<Video>> = Vec::new();
    for (ci, clip) in ds.split(Split::Train).enumerate() {
        let mut ar = rng::stream(cfg.seed, "augment", &[1, epoch as u64, ci as u64]);
        pasted.push(if cfg.step1_augment && ar.gen_bool(cfg.augment_prob) {
            Some(augment_clip(&clip.video, &cfg.augmentation, &geom, &mut ar)?)
        } else {
            None
        });
    }
    let mut frames: Vec<(&Video, Option<&Video>, usize)> = ds
        .split(Split::Train)
        .zip(&pasted)
        .flat_map(|(c, p)| (0..c.video.frames.len()).map(move |t| (&c.video, p.as_ref(), t)))
        .collect();
    frames.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[1, epoch as u64]));
    let mut epoch_total = 0.0;
    let mut batches = 0;
    for (bi, batch) in frames.chunks(cfg.batch_size).enumerate() {
        let mut sums = [0.0; 3];
        for &(video, pasted, t) in batch {
            let net = Network::new(model, &state.store, Mode::Train);
            let mut tape = Tape::new();
            let mut terms = step1_frame_loss(&net, &mut tape, &video.frames[t], &video.gts[t], &ds.basis, cfg, &geom)?;
            if let Some(p) = pasted {
                let x = tape.constant(p.frames[t].clone());
                let f = net.encode(&mut tape, x)?;
                let s = net.detect_obstacles(&mut tape, f)?;
                terms[2] = loss::focal_loss(&mut tape, s, &p.gts[t].s, &cfg.focal)?;
            }
            for (s, v) in sums.iter_mut().zip(terms) {
                *s += tape.value(v).item();
            }
            let total = sum_terms(&mut tape, &terms)?;
            let scaled = tape.scale(total, 1.0 / batch.len() as f64);
            let grads = tape.backward(scaled)?;
            let stats = tape.batch_stats().to_vec();
            grads.accumulate_into(&mut state.store)?;
            network::fold_batch_stats(&mut state.store, &stats)?;
        }
        let mut report = LossReport::new("step1", epoch, bi, sums, batch.len(), true);
        if !report.total.is_finite() {
            return Err(Error::Diverged(format!("step-1 loss {} at epoch {epoch}, batch {bi}", report.total)));
        }
        report.lr = state.optimizer.lr;
        report.skipped = state.optimizer.step(&mut state.store)? == StepOutcome::Skipped;
        report.step = state.optimizer.step;
        epoch_total += report.total;
        batches += 1;
        log.push(report);
    }
    let mean = epoch_total / batches.max(1) as f64;
    state.optimizer.end_epoch(mean);
    state.epochs_done += 1;
    Ok(mean)
}

pub fn train_step1(model: &ModelConfig, ds: &Dataset, cfg: &TrainConfig, log: &mut Vec<LossReport>) -> Result<TrainState> {
    let mut state = init_step1(model, ds, cfg)?;
    while state.epochs_done < cfg.step1_epochs {
        step1_epoch(&mut state, model, ds, cfg, log)?;
    }
    Ok(state)
}

// --- step 2 -----------------------------------------------------------------------

/// Start step 2 from step-1 parameters: the refinement module is
/// (re)initialized for `model.omr`, everything else is frozen.
pub fn init_step2(step1: &ParamStore, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let fresh = network::init_params(model, cfg.seed)?;
    let mut store = ParamStore::new();
    for (name, t) in step1.iter() {
        if !omr::is_omr_param(name) {
            store.insert(name, t.clone())?;
        }
    }
    for (name, t) in step1.buffers() {
        store.set_buffer(name, t.clone());
    }
    for (name, t) in fresh.iter() {
        if omr::is_omr_param(name) {
            store.insert(name, t.clone())?;
        }
    }
    for prefix in INTRA_FRAME_PREFIXES {
        store.freeze_prefix(prefix);
    }
    Ok(TrainState {
        store,
        optimizer: AdamW::new(cfg.step2_optimizer.clone()),
        epochs_done: 0,
    })
}

/// Paste random occluders into a copy of `video`.
pub fn augment_clip(video: &Video, profile: &OcclusionProfile, geom: &LaneGeometry, r: &mut rand_chacha::ChaCha8Rng) -> Result<Video> {
    let mut out = video.clone();
    let count = r.gen_range(profile.min_count..=profile.max_count);
    let horizon = geom.rows[0];
    for i in 0..count {
        let track = scenegen::sample_occluder(
            r,
            1000 + i as u32,
            geom.image_height,
            geom.image_width,
            horizon,
            video.frames.len(),
            profile,
        );
        scenegen::overlay_occluder(&mut out, &track, geom)?;
    }
    Ok(out)
}

/// One epoch of step 2: unroll every training clip in TBPTT windows, with
/// one optimizer step per window.
pub fn step2_epoch(
    state: &mut TrainState,
    model: &ModelConfig,
    ds: &Dataset,
    cfg: &TrainConfig,
    log: &mut Vec<LossReport>,
) -> Result<f64> {
    let geom = model.geometry()?;
    let epoch = state.epochs_done;
    let mut clips: Vec<(usize, &Clip)> = ds.split(Split::Train).enumerate().collect();
    clips.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[2, epoch as u64]));
    let extension = cfg.extension(&geom);
    let mut epoch_total = 0.0;
    let mut batch = 0;
    for (ci, clip) in clips {
        let mut ar = rng::stream(cfg.seed, "augment", &[epoch as u64, ci as u64]);
        let augmented;
        let video = if cfg.augment && ar.gen_bool(cfg.augment_prob) {
            augmented = augment_clip(&clip.video, &cfg.augmentation, &geom, &mut ar)?;
            &augmented
        } else {
            &clip.video
        };
        let mut carried: Option<CarriedState> = None;
        for (wi, window) in (0..video.frames.len()).collect::<Vec<_>>().chunks(cfg.tbptt).enumerate() {
            let net = Network::new(model, &state.store, Mode::Eval);
            let mut tape = Tape::new();
            let mut prev = match &carried {
                Some(s) => StateVars::from_carried(&mut tape, s),
                None => StateVars::initial(&net, &mut tape)?,
            };
            let mut times = StageTimes::default();
            let mut sums = [0.0; 3];
            let mut terms = Vec::with_capacity(2 * window.len());
            for &t in window {
                let intra = omr::intra_frame(&net, &video.frames[t], &mut times)?;
                let vars = omr::refine_frame(&net, &mut tape, &intra, &prev, &mut times)?;
                let gt = &video.gts[t];
                let cls = loss::focal_loss(&mut tape, vars.p, &gt.p, &cfg.focal)?;
                sums[0] += tape.value(cls).item();
                terms.push(cls);
                if let Some(reg) = regression_loss(&mut tape, vars.coeff, gt, &ds.basis, extension)? {
                    sums[1] += tape.value(reg).item();
                    terms.push(reg);
                }
                let lanes = network::nms_decode(tape.value(vars.p), tape.value(vars.coeff), &ds.basis, &geom, &model.nms)?;
                let f = tape.value(vars.f).clone();
                carried = Some(CarriedState {
                    frame_index: t as u64,
                    l_prev: lanes.mask.clone(),
                    f_prev: f,
                    memory: match (vars.h, vars.c) {
                        (Some(h), Some(c)) => Some(RecurrentState {
                            h: tape.value(h).clone(),
                            c: tape.value(c).clone(),
                        }),
                        _ => None,
                    },
                });
                let l = tape.constant(lanes.mask);
                prev = StateVars {
                    l_prev: l,
                    f_prev: vars.f,
                    h: vars.h,
                    c: vars.c,
                };
            }
            let total = sum_terms(&mut tape, &terms)?;
            let scaled = tape.scale(total, 1.0 / window.len() as f64);
            let mut report = LossReport::new("step2", epoch, batch, sums, window.len(), false);
            if !report.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "step-2 loss {} at epoch {epoch}, clip {}, window {wi}",
                    report.total, clip.name
                )));
            }
            let grads = tape.backward(scaled)?;
            grads.accumulate_into(&mut state.store)?;
            report.lr = state.optimizer.lr;
            report.skipped = state.optimizer.step(&mut state.store)? == StepOutcome::Skipped;
            report.step = state.optimizer.step;
            epoch_total += report.total;
            batch += 1;
            log.push(report);
        }
    }
    let mean = epoch_total / batch.max(1) as f64;
    state.optimizer.end_epoch(mean);
    state.epochs_done += 1;
    Ok(mean)
}

pub fn train_step2(
    step1: &ParamStore,
    model: &ModelConfig,
    ds: &Dataset,
    cfg: &TrainConfig,
    log: &mut Vec<LossReport>,
) -> Result<TrainState> {
    check_compatible(model, ds)?;
    let mut state = init_step2(step1, model, cfg)?;
    while state.epochs_done < cfg.step2_epochs {
        step2_epoch(&mut state, model, ds, cfg, log)?;
    }
    Ok(state)
}
