use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use omr_core::dataset::DatasetConfig;
use omr_core::eigenlane::{self, EigenlaneBasis, LaneCurve};
use omr_core::geometry::LaneGeometry;
use omr_core::network::{self, ModelConfig};
use omr_core::scenegen::{OcclusionProfile, SceneRanges};
use omr_core::training::TrainConfig;
use omr_core::{ParamStore, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Fixed random weighting keeps the objective sensitive to every output entry.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random(&mut r, tape.value(y).shape());
    let wv = tape.constant(w);
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}

/// 32×32 input, 8×8 grid, K = 4.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        image_height: 32,
        image_width: 32,
        k: 4,
        m: 3,
        n_rows: 8,
        horizon: 8.0,
        backbone: [4, 4, 4, 4, 4],
        ..ModelConfig::desk()
    }
}

/// Every parameter drawn from `N(0, std²)`-ish uniform noise, buffers kept.
pub fn randomize(store: &mut ParamStore, prefix: &str, scale: f64, r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

/// Random straight-ish lanes converging toward the horizon.
pub fn random_lanes(r: &mut ChaCha8Rng, geom: &LaneGeometry, count: usize) -> Vec<LaneCurve> {
    let w = geom.image_width as f64;
    let (top, bottom) = (geom.rows[0], *geom.rows.last().unwrap());
    (0..count)
        .map(|_| {
            let x0 = r.gen_range(0.3..0.7) * w;
            let x1 = r.gen_range(-0.2..1.2) * w;
            let bow = r.gen_range(-0.1..0.1) * w;
            LaneCurve::full(
                geom.rows
                    .iter()
                    .map(|&y| {
                        let v = (y - top) / (bottom - top);
                        x0 + (x1 - x0) * v + bow * v * (1.0 - v)
                    })
                    .collect(),
            )
        })
        .collect()
}

pub fn random_basis(r: &mut ChaCha8Rng, geom: &LaneGeometry, m: usize) -> EigenlaneBasis {
    eigenlane::fit_basis(&random_lanes(r, geom, 40), m).unwrap()
}

/// A small dataset and model pair that trains in seconds.
pub fn tiny_setup(seed: u64) -> (DatasetConfig, ModelConfig, TrainConfig) {
    let ds = DatasetConfig {
        seed,
        image_height: 32,
        image_width: 64,
        n_rows: 8,
        horizon: 10.0,
        m: 3,
        frames: 4,
        train_clips: 3,
        test_clips: 2,
        train: SceneRanges {
            min_lanes: 2,
            max_lanes: 3,
            occlusion: OcclusionProfile::light(),
        },
        test: SceneRanges {
            min_lanes: 2,
            max_lanes: 3,
            occlusion: OcclusionProfile::heavy(),
        },
        stripe_width: 4.0,
    };
    let model = ModelConfig {
        image_height: 32,
        image_width: 64,
        k: 8,
        m: 3,
        n_rows: 8,
        horizon: 10.0,
        backbone: [4, 6, 8, 8, 8],
        ..ModelConfig::desk()
    };
    let train = TrainConfig {
        seed,
        step1_epochs: 2,
        step2_epochs: 1,
        batch_size: 2,
        tbptt: 2,
        ..TrainConfig::default()
    };
    (ds, model, train)
}

pub fn toy_store(seed: u64) -> ParamStore {
    network::init_params(&toy_model(), seed).unwrap()
}
