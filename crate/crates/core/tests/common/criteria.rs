//! The acceptance checks. Each returns a pass flag with a one-line detail;
//! the integration tests and the acceptance runner share them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use omr_core::autodiff::Tape;
use omr_core::checkpoint::{self, Checkpoint, Progress};
use omr_core::dataset::{self, Split};
use omr_core::eigenlane::{self, LaneCurve};
use omr_core::experiment::{self, Pipeline, Variant};
use omr_core::geometry::LaneGeometry;
use omr_core::gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport};
use omr_core::io;
use omr_core::metrics::{self, ClipReport, MetricConfig, Report};
use omr_core::network::{self, ModelConfig, Network, INTRA_FRAME_PREFIXES};
use omr_core::omr::{self, GateVariant, IntraFrame, OmrConfig, StageTimes, StateVars, VideoStream};
use omr_core::scenegen::GtLane;
use omr_core::training::loss::{self, FocalConfig, LaneTarget};
use omr_core::training::{self, TrainConfig};
use omr_core::{ParamStore, Tensor};

use super::fixtures::{self, random, rng, weighted_sum};
use super::oracles;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

// --- 1: gradients ----------------------------------------------------------------

fn gc() -> GradCheckConfig {
    GradCheckConfig::default()
}

pub fn grad_conv2d(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let k = if r.gen_bool(0.5) { 3 } else { 1 };
    let stride = r.gen_range(1..=2);
    let (h, w) = (r.gen_range(4..=7), r.gen_range(4..=7));
    let inputs = vec![random(&mut r, &[ci, h, w]), random(&mut r, &[co, ci, k, k]), random(&mut r, &[co])];
    check_inputs(
        &inputs,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)?;
            Ok(weighted_sum(t, y, seed))
        },
        &gc(),
    )
    .unwrap()
}

pub fn grad_batchnorm_relu(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let c = r.gen_range(1..=3);
    let training = seed % 2 == 0;
    let inputs = vec![
        random(&mut r, &[c, 4, 4]),
        Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5)),
        Tensor::from_fn(&[c], |_| r.gen_range(-0.3..0.3)),
    ];
    let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.2..0.2)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..1.5)).collect();
    check_inputs(
        &inputs,
        |t, v| {
            let running = (!training).then_some((&mean[..], &var[..]));
            let y = t.batchnorm_relu(v[0], v[1], v[2], running, training, "bn")?;
            Ok(weighted_sum(t, y, seed))
        },
        &gc(),
    )
    .unwrap()
}

pub fn grad_deform_conv(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (ci, co) = (r.gen_range(1..=2), r.gen_range(1..=2));
    let (h, w) = (r.gen_range(4..=6), r.gen_range(4..=6));
    // Offsets away from integer sample positions, where bilinear sampling has kinks.
    let off = Tensor::from_fn(&[50, h, w], |_| r.gen_range(-2i32..=2) as f64 + r.gen_range(0.1..0.9));
    let inputs = vec![
        random(&mut r, &[ci, h, w]),
        off,
        Tensor::from_fn(&[25, h, w], |_| r.gen_range(0.2..1.8)),
        random(&mut r, &[co, ci, 5, 5]),
        random(&mut r, &[co]),
    ];
    check_inputs(
        &inputs,
        |t, v| {
            let y = t.deform_conv(v[0], v[1], v[2], v[3], Some(v[4]))?;
            Ok(weighted_sum(t, y, seed))
        },
        &gc(),
    )
    .unwrap()
}

fn gates_for(seed: u64) -> GateVariant {
    if seed % 2 == 0 {
        GateVariant::Printed
    } else {
        GateVariant::Standard
    }
}

pub fn grad_convlstm(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let model = ModelConfig {
        omr: OmrConfig {
            gates: gates_for(seed),
            ..OmrConfig::default()
        },
        ..fixtures::toy_model()
    };
    let mut store = network::init_params(&model, seed).unwrap();
    fixtures::randomize(&mut store, "omr.w", 0.3, &mut r);
    let k = model.k;
    for name in ["t.z", "t.h", "t.c"] {
        store.insert(name, random(&mut r, &[k, 4, 4])).unwrap();
    }
    let mut names: Vec<String> = (0..4)
        .flat_map(|g| {
            let (a, b) = omr::gate_convs(g);
            [format!("{a}.w"), format!("{a}.b"), format!("{b}.w")]
        })
        .collect();
    names.extend(["t.z", "t.h", "t.c"].map(String::from));
    check_params(
        &store,
        &names,
        |t, s| {
            let net = Network::new(&model, s, network::Mode::Eval);
            let z = t.param(s, "t.z")?;
            let h = t.param(s, "t.h")?;
            let c = t.param(s, "t.c")?;
            let (h1, c1, _) = omr::convlstm_step(&net, t, z, h, c)?;
            let a = weighted_sum(t, h1, seed);
            let b = weighted_sum(t, c1, seed + 1);
            t.add(a, b)
        },
        Some(6),
        &mut r,
        &gc(),
    )
    .unwrap()
}

pub fn grad_focal(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let shape = [1, r.gen_range(2..=5), r.gen_range(2..=5)];
    let pred = Tensor::from_fn(&shape, |_| r.gen_range(0.05..0.95));
    let gt = Tensor::from_fn(&shape, |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    let cfg = FocalConfig {
        gamma: [0.0, 1.0, 2.0][seed as usize % 3],
        alpha: if seed % 2 == 0 { Some(0.25) } else { None },
    };
    check_inputs(&[pred], |t, v| loss::focal_loss(t, v[0], &gt, &cfg), &gc()).unwrap()
}

pub fn grad_liou(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (n, rows) = (r.gen_range(1..=4), r.gen_range(3..=8));
    let pred = Tensor::from_fn(&[n, rows], |_| r.gen_range(0.0..40.0));
    let e = r.gen_range(1.0..5.0);
    let targets: Vec<LaneTarget> = (0..n)
        .map(|i| {
            // Keep |p - g| away from zero, where the absolute value has a kink.
            let xs = (0..rows)
                .map(|j| {
                    let d = r.gen_range(0.2..8.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                    pred.data()[i * rows + j] + d
                })
                .collect();
            let lo = r.gen_range(0..rows - 1);
            LaneTarget {
                xs,
                rows: Some((lo, r.gen_range(lo + 1..rows))),
            }
        })
        .collect();
    check_inputs(&[pred], |t, v| loss::liou_loss(t, v[0], targets.clone(), e), &gc()).unwrap()
}

/// Aggregation, memory update, refinement and both decoders of one frame on
/// the toy model, checked over every refinement parameter.
pub fn grad_omr_step(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let model = ModelConfig {
        omr: OmrConfig {
            gates: gates_for(seed),
            use_obstacle_mask: seed % 4 != 3,
            ..OmrConfig::default()
        },
        ..fixtures::toy_model()
    };
    let mut store = network::init_params(&model, seed).unwrap();
    fixtures::randomize(&mut store, "omr.", 0.3, &mut r);
    // A constant fractional offset keeps the deformable sampler off its kinks.
    store.get_mut("dec.coeff.offset.b").unwrap().data_mut().fill(0.37);
    fixtures::randomize(&mut store, "dec.coeff.modulation.w", 0.2, &mut r);
    let (k, (h, w)) = (model.k, model.grid());
    let binary = |r: &mut ChaCha8Rng| Tensor::from_fn(&[1, h, w], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    let intra = IntraFrame {
        f_tilde: random(&mut r, &[k, h, w]),
        s: Tensor::zeros(&[1, h, w]),
        o: binary(&mut r),
    };
    let l_prev = binary(&mut r);
    let f_prev = random(&mut r, &[k, h, w]);
    let gt = binary(&mut r);
    let names: Vec<String> = store.names().filter(|n| omr::is_omr_param(n)).map(String::from).collect();
    check_params(
        &store,
        &names,
        |t, s| {
            let net = Network::new(&model, s, network::Mode::Eval);
            let prev = StateVars {
                l_prev: t.constant(l_prev.clone()),
                f_prev: t.constant(f_prev.clone()),
                h: Some(t.param(s, "omr.h0")?),
                c: Some(t.param(s, "omr.c0")?),
            };
            let v = omr::refine_frame(&net, t, &intra, &prev, &mut StageTimes::default())?;
            let cls = loss::focal_loss(t, v.p, &gt, &FocalConfig::default())?;
            let reg = weighted_sum(t, v.coeff, seed);
            t.add(cls, reg)
        },
        Some(3),
        &mut r,
        &gc(),
    )
    .unwrap()
}

pub fn gradient_suite(instances: u64) -> Outcome {
    let start = Instant::now();
    let suites: [(&str, fn(u64) -> GradCheckReport); 7] = [
        ("conv2d", grad_conv2d),
        ("batchnorm_relu", grad_batchnorm_relu),
        ("deform_conv", grad_deform_conv),
        ("convlstm_step", grad_convlstm),
        ("focal", grad_focal),
        ("liou", grad_liou),
        ("omr_step", grad_omr_step),
    ];
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (name, f) in suites {
        for seed in 0..instances {
            let rep = f(1000 + seed);
            worst = worst.max(rep.max_rel_error);
            if !rep.passed(&gc()) {
                failures.push(format!("{name}#{seed} ({:.2e})", rep.max_rel_error));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    Outcome::new(
        pass,
        format!(
            "7 ops x {instances} instances, max rel err {worst:.2e}, {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!(", failed: {}", failures.join(" ")) }
        ),
    )
}

// --- 2: oracles --------------------------------------------------------------------

pub fn conv_oracle_gap(instances: u64) -> f64 {
    let mut gap = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(2000 + seed);
        let (ci, co) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=k / 2);
        let (h, w) = (r.gen_range(k..k + 6), r.gen_range(k..k + 6));
        let x = random(&mut r, &[ci, h, w]);
        let kern = random(&mut r, &[co, ci, k, k]);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(kern.clone()));
        let y = t.conv2d(xv, kv, None, stride, pad).unwrap();
        let want = oracles::conv(&x, &kern, stride, pad);
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

pub fn desk_geometry() -> LaneGeometry {
    ModelConfig::desk().geometry().unwrap()
}

/// Random pairs of nearby lanes; returns how many IoUs differ from the pixel-set oracle.
pub fn lane_iou_mismatches(instances: u64) -> usize {
    let geom = desk_geometry();
    let half = MetricConfig::default().half_width(&geom);
    let mut bad = 0;
    for seed in 0..instances {
        let mut r = rng(3000 + seed);
        let a = fixtures::random_lanes(&mut r, &geom, 1).remove(0);
        let shift = r.gen_range(-8.0..8.0);
        let tilt = r.gen_range(-0.1..0.1);
        let bxs: Vec<f64> = a.xs.iter().enumerate().map(|(i, x)| x + shift + tilt * i as f64).collect();
        let va = geom.valid_range(&a.xs);
        let vb = geom.valid_range(&bxs);
        let (Some(va), Some(vb)) = (va, vb) else { continue };
        let a = LaneCurve::new(a.xs, va).unwrap();
        let b = LaneCurve::new(bxs, vb).unwrap();
        if metrics::lane_iou(&a, &b, &geom, half) != oracles::pixel_set_iou(&geom, &a, &b, half) {
            bad += 1;
        }
    }
    bad
}

pub fn liou_oracle_gap(instances: u64) -> f64 {
    let mut gap = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(4000 + seed);
        let n = r.gen_range(2..40);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..160.0)).collect();
        let g: Vec<f64> = p.iter().map(|x| x + r.gen_range(-20.0..20.0)).collect();
        let lo = r.gen_range(0..n);
        let rows = (lo, r.gen_range(lo..n));
        let e = r.gen_range(0.5..20.0);
        let lib = loss::line_iou(&p, &g, rows, e).unwrap();
        gap = gap.max((lib - oracles::interval_liou(&p, &g, rows, e)).abs());
    }
    gap
}

/// NMS on random ≤ 16×16 grids; returns the number of instances whose
/// selected lanes differ from the reference, and the lanes compared.
pub fn nms_mismatches(instances: u64) -> (usize, usize) {
    let mut bad = 0;
    let mut lanes = 0;
    for seed in 0..instances {
        let mut r = rng(5000 + seed);
        let side = [32, 48, 64][r.gen_range(0..3)];
        let geom = LaneGeometry::new(side, 64, 4, 8, 6.0).unwrap();
        let basis = fixtures::random_basis(&mut r, &geom, 3);
        let (h, w) = (geom.grid_height(), geom.grid_width());
        let p = Tensor::from_fn(&[1, h, w], |_| if r.gen_bool(0.3) { r.gen_range(0.0..1.0) } else { r.gen_range(0.0..0.5) });
        let mut c = Tensor::zeros(&[3, h, w]);
        for q in 0..h * w {
            let lane = fixtures::random_lanes(&mut r, &geom, 1).remove(0);
            let coeff = basis.project(&lane).unwrap();
            for (k, v) in coeff.iter().enumerate() {
                c.data_mut()[k * h * w + q] = *v;
            }
        }
        let cfg = network::NmsConfig {
            max_lanes: r.gen_range(1..=8),
            ..Default::default()
        };
        let lib = network::nms_decode(&p, &c, &basis, &geom, &cfg).unwrap();
        let curve_at = |q: usize| basis.reconstruct(&(0..3).map(|k| c.data()[k * h * w + q]).collect::<Vec<_>>()).unwrap().xs;
        let half = cfg.suppress_half_width * geom.width_scale();
        let want: Vec<(usize, usize)> = oracles::nms(&p, &curve_at, &geom, cfg.threshold, cfg.max_lanes, half)
            .into_iter()
            .filter(|&q| geom.valid_range(&curve_at(q)).is_some())
            .map(|q| (q / w, q % w))
            .collect();
        let got: Vec<(usize, usize)> = lib.lanes.iter().map(|l| l.origin).collect();
        lanes += want.len();
        if got != want {
            bad += 1;
        }
    }
    (bad, lanes)
}

/// GT lanes with pairwise disjoint stripes plus noisy and spurious
/// predictions; returns the number of instances where greedy and
/// exhaustive assignment disagree on the TP count.
pub fn matching_mismatches(instances: u64) -> usize {
    let geom = desk_geometry();
    let metric = MetricConfig::default();
    let half = metric.half_width(&geom);
    let mut bad = 0;
    for seed in 0..instances {
        let mut r = rng(6000 + seed);
        let n_gt = r.gen_range(1..=4);
        // Shifted copies of one lane, 16 to 30 px apart, so the stripes are disjoint.
        let base = fixtures::random_lanes(&mut r, &geom, 1).remove(0);
        let mut offset = 0.0;
        let mut gts: Vec<GtLane> = Vec::new();
        for id in 0..n_gt {
            let xs: Vec<f64> = base.xs.iter().map(|x| x - 40.0 + offset).collect();
            offset += r.gen_range(16.0..30.0);
            let Some(valid) = geom.valid_range(&xs) else { continue };
            let c = LaneCurve::new(xs, valid).unwrap();
            assert!(gts.iter().all(|g| metrics::lane_iou(&g.curve, &c, &geom, half) == 0.0));
            gts.push(GtLane { track_id: id as u32, curve: c });
        }
        if gts.is_empty() {
            continue;
        }
        let n_pred = r.gen_range(0..=4);
        let preds: Vec<LaneCurve> = (0..n_pred)
            .filter_map(|_| {
                let xs: Vec<f64> = if r.gen_bool(0.75) {
                    let g = &gts[r.gen_range(0..gts.len())].curve;
                    let s = r.gen_range(-4.0..4.0);
                    g.xs.iter().map(|x| x + s + r.gen_range(-1.0..1.0)).collect()
                } else {
                    fixtures::random_lanes(&mut r, &geom, 1).remove(0).xs
                };
                geom.valid_range(&xs).map(|v| LaneCurve::new(xs, v).unwrap())
            })
            .collect();
        let ious = metrics::iou_matrix(&preds, &gts, &geom, half);
        let ids: Vec<u32> = gts.iter().map(|g| g.track_id).collect();
        let greedy = metrics::greedy_match(&ious, &ids, metric.iou_threshold).matches.len();
        if greedy != oracles::exhaustive_tp(&ious, gts.len(), metric.iou_threshold) {
            bad += 1;
        }
    }
    bad
}

pub fn oracle_equivalence() -> Outcome {
    let conv = conv_oracle_gap(30);
    let iou = lane_iou_mismatches(60);
    let liou = liou_oracle_gap(60);
    let (nms, nms_lanes) = nms_mismatches(40);
    let matching = matching_mismatches(80);
    let pass = conv <= 1e-12 && iou == 0 && liou <= 1e-10 && nms == 0 && matching == 0;
    Outcome::new(
        pass,
        format!(
            "conv gap {conv:.1e}, lane_iou mismatches {iou}/60, LIoU gap {liou:.1e}, NMS mismatches {nms}/40 ({nms_lanes} lanes), matching mismatches {matching}/80"
        ),
    )
}

// --- 3: degeneracies ---------------------------------------------------------------

pub fn deform_conv_gap(instances: u64) -> f64 {
    let mut gap = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(7000 + seed);
        let (ci, co) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let (h, w) = (r.gen_range(3..=9), r.gen_range(3..=9));
        let x = random(&mut r, &[ci, h, w]);
        let k = random(&mut r, &[co, ci, 5, 5]);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let kv = t.constant(k);
        let off = t.constant(Tensor::zeros(&[50, h, w]));
        let m = t.constant(Tensor::ones(&[25, h, w]));
        let a = t.deform_conv(xv, off, m, kv, None).unwrap();
        let b = t.conv2d(xv, kv, None, 1, 2).unwrap();
        for (p, q) in t.value(a).data().iter().zip(t.value(b).data()) {
            gap = gap.max((p - q).abs());
        }
    }
    gap
}

/// Frames whose refined output (probability, coefficients, lanes) differs
/// from the intra-frame output when every refinement parameter is zero.
pub fn zeroed_omr_mismatches(clips: u64) -> usize {
    let (dcfg, model, _) = fixtures::tiny_setup(11);
    let ds = dataset::build(&dcfg).unwrap();
    let mut bad = 0;
    for seed in 0..clips {
        let mut r = rng(8000 + seed);
        let mut store = network::init_params(&model, seed).unwrap();
        fixtures::randomize(&mut store, "dec.", 0.4, &mut r);
        fixtures::randomize(&mut store, "enc.", 0.4, &mut r);
        let names: Vec<String> = store.names().filter(|n| omr::is_omr_param(n)).map(String::from).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let clip = &ds.clips[seed as usize % ds.clips.len()];
        let refined = omr::process_video(&model, &store, &ds.basis, &clip.video.frames).unwrap();
        let intra = omr::process_intra(&model, &store, &ds.basis, &clip.video.frames).unwrap();
        for (a, b) in refined.iter().zip(&intra) {
            if a.p != b.p || a.coeff != b.coeff || a.lanes != b.lanes || a.f != b.intra.f_tilde {
                bad += 1;
            }
        }
    }
    bad
}

/// Zero gate parameters, zero previous cell: `f = i = g = 0.5`, `o = 0`,
/// `c = 0.25`, `h = 0` exactly. Returns the number of violating entries.
pub fn convlstm_closed_form_violations(instances: u64) -> usize {
    let model = fixtures::toy_model();
    let mut store = network::init_params(&model, 0).unwrap();
    let names: Vec<String> = store.names().filter(|n| n.starts_with("omr.w")).map(String::from).collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let net = Network::new(&model, &store, network::Mode::Eval);
    let mut bad = 0;
    for seed in 0..instances {
        let mut r = rng(9000 + seed);
        let mut t = Tape::new();
        let z = t.constant(random(&mut r, &[4, 8, 8]));
        let h = t.constant(random(&mut r, &[4, 8, 8]));
        let c = t.constant(Tensor::zeros(&[4, 8, 8]));
        let (h1, c1, g) = omr::convlstm_step(&net, &mut t, z, h, c).unwrap();
        let expect = [(g.f, 0.5), (g.i, 0.5), (g.g, 0.5), (g.o, 0.0), (c1, 0.25), (h1, 0.0)];
        for (v, want) in expect {
            bad += t.value(v).data().iter().filter(|&&x| x != want).count();
        }
    }
    bad
}

pub fn degeneracy_identities() -> Outcome {
    let deform = deform_conv_gap(20);
    let zeroed = zeroed_omr_mismatches(5);
    let lstm = convlstm_closed_form_violations(10);
    Outcome::new(
        deform <= 1e-12 && zeroed == 0 && lstm == 0,
        format!("deform vs conv gap {deform:.1e}, zeroed-OMR frame mismatches {zeroed}, ConvLSTM closed-form violations {lstm}"),
    )
}

// --- 4: eigenlane ------------------------------------------------------------------

/// Scene-like lanes with per-row jitter so the data has full rank.
pub fn eigen_training_lanes(count: usize, seed: u64) -> (LaneGeometry, Vec<LaneCurve>) {
    let geom = desk_geometry();
    let mut r = rng(seed);
    let lanes = fixtures::random_lanes(&mut r, &geom, count)
        .into_iter()
        .map(|l| LaneCurve::full(l.xs.iter().map(|x| x + r.gen_range(-0.5..0.5)).collect()))
        .collect();
    (geom, lanes)
}

pub fn lib_rmse(basis: &eigenlane::EigenlaneBasis, lanes: &[LaneCurve]) -> f64 {
    lanes
        .iter()
        .map(|l| {
            let back = basis.reconstruct(&basis.project(l).unwrap()).unwrap();
            let se: f64 = back.xs.iter().zip(&l.xs).map(|(a, b)| (a - b).powi(2)).sum();
            (se / l.len() as f64).sqrt()
        })
        .sum::<f64>()
        / lanes.len() as f64
}

pub fn eigenlane_suite() -> Outcome {
    let (geom, lanes) = eigen_training_lanes(150, 10);
    let n = geom.n_rows();
    let cols: Vec<Vec<f64>> = lanes.iter().map(|l| l.xs.clone()).collect();
    let mut ortho = 0.0f64;
    let mut round_trip = 0.0f64;
    let mut oracle_gap = 0.0f64;
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    let mut r = rng(11);
    for m in 1..=12 {
        let basis = eigenlane::fit_basis(&lanes, m).unwrap();
        ortho = ortho.max(basis.orthonormality_error());
        for _ in 0..5 {
            let c: Vec<f64> = (0..m).map(|_| r.gen_range(-100.0..100.0)).collect();
            let back = basis.project(&basis.reconstruct(&c).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&c) {
                round_trip = round_trip.max((a - b).abs());
            }
        }
        let rmse = lib_rmse(&basis, &lanes);
        oracle_gap = oracle_gap.max((rmse - oracles::truncation_rmse(&cols, m)).abs());
        monotone &= rmse <= prev;
        prev = rmse;
    }
    Outcome::new(
        ortho < 1e-10 && round_trip < 1e-9 && oracle_gap < 1e-9 && monotone,
        format!(
            "N={n}, M=1..12: orthonormality {ortho:.1e}, round trip {round_trip:.1e}, RMSE vs Jacobi oracle {oracle_gap:.1e}, non-increasing {monotone}"
        ),
    )
}

// --- 5: ablation -------------------------------------------------------------------

pub struct AblationSetup {
    pub dataset: dataset::DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

pub fn ablation_setup() -> AblationSetup {
    AblationSetup {
        dataset: dataset::DatasetConfig::desk(7),
        model: ModelConfig::desk(),
        train: TrainConfig::default(),
        seeds: vec![1, 2, 3],
    }
}

pub fn ablation_direction(setup: &AblationSetup) -> (Outcome, Vec<experiment::VariantResult>) {
    let start = Instant::now();
    let ds = dataset::build(&setup.dataset).unwrap();
    let test_clips = ds.split(Split::Test).count();
    let mut log = Vec::new();
    let results = experiment::run_matrix(
        &setup.model,
        &ds,
        &setup.train,
        &setup.seeds,
        &[Variant::no_augmentation(), Variant::full()],
        &MetricConfig::default(),
        &mut log,
        &mut |_| Ok(()),
    )
    .unwrap();
    let (f_full, m_full) = experiment::seed_means(&results, "full").unwrap();
    let (f_intra, m_intra) = experiment::seed_means(&results, "intra").unwrap();
    let (f_noaug, m_noaug) = experiment::seed_means(&results, "no-augmentation").unwrap();
    let pass = test_clips >= 20 && f_full > f_intra && f_full > f_noaug && m_full < m_intra && m_full < m_noaug;
    let detail = format!(
        "{test_clips} heavy-occlusion test clips, {} seeds, {:.0}s: F1 full {f_full:.4} / intra {f_intra:.4} / no-aug {f_noaug:.4}; R_M full {m_full:.4} / intra {m_intra:.4} / no-aug {m_noaug:.4}",
        setup.seeds.len(),
        start.elapsed().as_secs_f64()
    );
    (Outcome::new(pass, detail), results)
}

// --- 6: temporal accounting -----------------------------------------------------------

pub fn accounting_holds(reports: &[ClipReport]) -> bool {
    let summaries = reports.iter().map(|c| c.summary.clone()).chain(std::iter::once(metrics::pool(reports)));
    summaries.into_iter().all(|s| {
        let st = s.stability;
        if st.n != st.stable + st.flickering + st.missing {
            return false;
        }
        match (s.r_f, s.r_m) {
            (Some(rf), Some(rm)) => (rf + rm + st.stable as f64 / st.n as f64 - 1.0).abs() <= 1e-12,
            (None, None) => st.n == 0,
            _ => false,
        }
    })
}

/// Random per-frame predictions around GT lanes of generated clips.
pub fn random_clip_reports(clips: u64) -> Vec<ClipReport> {
    let (dcfg, _, _) = fixtures::tiny_setup(21);
    let ds = dataset::build(&dataset::DatasetConfig {
        train_clips: 2,
        test_clips: clips as usize,
        frames: 6,
        ..dcfg
    })
    .unwrap();
    let geom = ds.geometry().unwrap();
    let metric = MetricConfig::default();
    let mut r = rng(12);
    ds.split(Split::Test)
        .map(|clip| {
            let gts: Vec<Vec<GtLane>> = clip.video.gts.iter().map(|g| g.lanes.clone()).collect();
            let preds: Vec<Vec<LaneCurve>> = gts
                .iter()
                .map(|frame| {
                    frame
                        .iter()
                        .filter_map(|g| {
                            let keep = r.gen_bool(0.6);
                            let s = r.gen_range(-3.0..3.0);
                            keep.then(|| LaneCurve::new(g.curve.xs.iter().map(|x| x + s).collect(), g.curve.valid).unwrap())
                        })
                        .collect()
                })
                .collect();
            metrics::evaluate_clip(&clip.name, &preds, &gts, &geom, &metric)
        })
        .collect()
}

// --- 7: streaming ------------------------------------------------------------------

/// Clips whose batch output differs from frame-by-frame streaming where the
/// state crosses a serialized token between every frame.
pub fn streaming_mismatches(clips: u64) -> usize {
    let (dcfg, model, _) = fixtures::tiny_setup(31);
    let ds = dataset::build(&dataset::DatasetConfig {
        train_clips: 2,
        test_clips: clips as usize,
        frames: 6,
        ..dcfg
    })
    .unwrap();
    let mut bad = 0;
    for (i, clip) in ds.split(Split::Test).enumerate() {
        let mut r = rng(10_000 + i as u64);
        let mut store = network::init_params(&model, i as u64).unwrap();
        fixtures::randomize(&mut store, "omr.", 0.3, &mut r);
        fixtures::randomize(&mut store, "dec.prob.out.b", 2.0, &mut r);
        let batch = omr::process_video(&model, &store, &ds.basis, &clip.video.frames).unwrap();
        let mut token: Option<Vec<u8>> = None;
        let mut same = true;
        for (t, frame) in clip.video.frames.iter().enumerate() {
            let mut stream = match &token {
                Some(tok) => VideoStream::resume(&model, &store, &ds.basis, tok).unwrap(),
                None => VideoStream::new(&model, &store, &ds.basis).unwrap(),
            };
            let out = stream.push_frame(frame).unwrap();
            token = Some(out.state.to_bytes());
            let b = &batch[t];
            same &= out.lanes == b.lanes && out.p == b.p && out.coeff == b.coeff && out.f == b.f && out.state == b.state;
        }
        bad += !same as usize;
    }
    bad
}

// --- 8 and 9: full pipeline ------------------------------------------------------------

pub struct PipelineRun {
    pub root: PathBuf,
    pub step1: ParamStore,
    pub step2: ParamStore,
}

/// Generate, save and reload a dataset, train both steps with checkpoints,
/// and write the evaluation report, all under `root`.
pub fn run_pipeline(root: &Path, seed: u64) -> PipelineRun {
    let (dcfg, model, train) = fixtures::tiny_setup(seed);
    let ds_dir = root.join("dataset");
    dataset::save(&dataset::build(&dcfg).unwrap(), &ds_dir).unwrap();
    let ds = dataset::load(&ds_dir).unwrap();
    let mut log = Vec::new();
    let s1 = training::train_step1(&model, &ds, &train, &mut log).unwrap();
    let save = |dir: &str, store: &ParamStore, stage: &str, epochs: usize, opt| {
        checkpoint::save(
            &Checkpoint {
                model: model.clone(),
                store: store.clone(),
                basis: ds.basis.clone(),
                progress: Some(Progress {
                    stage: stage.into(),
                    epochs_done: epochs,
                    seed,
                }),
                optimizer: opt,
            },
            &root.join(dir),
        )
        .unwrap()
    };
    save("step1", &s1.store, "step1", s1.epochs_done, Some(s1.optimizer.clone()));
    let s1_loaded = checkpoint::load(&root.join("step1")).unwrap().store;
    let s2 = training::train_step2(&s1_loaded, &model, &ds, &train, &mut log).unwrap();
    save("step2", &s2.store, "step2", s2.epochs_done, Some(s2.optimizer.clone()));
    io::write_json(&root.join("loss_log.json"), &log).unwrap();
    let metric = MetricConfig::default();
    let (overall, clips) = experiment::evaluate(&model, &s2.store, &ds, Split::Test, Pipeline::Refined, &metric).unwrap();
    let report = Report {
        label: "full".into(),
        dataset_sha256: dataset::dataset_hash(&ds_dir).unwrap(),
        checkpoint_sha256: checkpoint::read_manifest(&root.join("step2")).unwrap().params_sha256,
        metric,
        overall,
        clips,
    };
    io::write_json(&root.join("report.json"), &report).unwrap();
    PipelineRun {
        root: root.to_path_buf(),
        step1: s1_loaded,
        step2: s2.store,
    }
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Files that differ (or exist in only one tree).
pub fn tree_differences(a: &Path, b: &Path) -> Vec<PathBuf> {
    let (fa, fb) = (files(a), files(b));
    let mut diff: Vec<PathBuf> = fa.iter().filter(|f| !fb.contains(f)).cloned().collect();
    diff.extend(fb.iter().filter(|f| !fa.contains(f)).cloned());
    for f in fa.iter().filter(|f| fb.contains(f)) {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            diff.push(f.clone());
        }
    }
    diff
}

/// Intra-frame parameters that changed between step 1 and step 2, and
/// whether any refinement parameter moved at all.
pub fn freeze_violations(run: &PipelineRun) -> (Vec<String>, bool) {
    let mut changed = Vec::new();
    for (name, t) in run.step1.iter() {
        if INTRA_FRAME_PREFIXES.iter().any(|p| name.starts_with(p)) && run.step2.get(name) != Some(t) {
            changed.push(name.to_string());
        }
    }
    for (name, t) in run.step1.buffers() {
        if run.step2.buffer(name) != Some(t) {
            changed.push(name.to_string());
        }
    }
    let omr_moved = run
        .step2
        .iter()
        .any(|(n, t)| omr::is_omr_param(n) && run.step1.get(n).is_some_and(|s| s != t));
    (changed, omr_moved)
}
