//! Evaluation of trained models on a dataset split, and the ablation matrix
//! (intra-frame baseline plus step-2 variants) sharing data and step-1 weights.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::eigenlane::{EigenlaneBasis, LaneCurve};
use crate::error::Result;
use crate::metrics::{self, ClipReport, MetricConfig, Summary};
use crate::network::ModelConfig;
use crate::omr::{self, OmrConfig};
use crate::par;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{self, LossReport, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Encoder and decoder only, frame by frame.
    Intra,
    /// With the recurrent refinement.
    Refined,
}

pub fn predict_clip(
    model: &ModelConfig,
    store: &ParamStore,
    basis: &EigenlaneBasis,
    frames: &[Tensor],
    pipeline: Pipeline,
) -> Result<Vec<Vec<LaneCurve>>> {
    let curves = |lanes: &crate::network::LaneMask| lanes.lanes.iter().map(|l| l.curve.clone()).collect();
    Ok(match pipeline {
        Pipeline::Intra => omr::process_intra(model, store, basis, frames)?
            .iter()
            .map(|o| curves(&o.lanes))
            .collect(),
        Pipeline::Refined => omr::process_video(model, store, basis, frames)?
            .iter()
            .map(|o| curves(&o.lanes))
            .collect(),
    })
}

/// Evaluate every clip of `split`. Clips run in parallel; results keep clip order.
pub fn evaluate(
    model: &ModelConfig,
    store: &ParamStore,
    ds: &Dataset,
    split: Split,
    pipeline: Pipeline,
    metric: &MetricConfig,
) -> Result<(Summary, Vec<ClipReport>)> {
    training::check_compatible(model, ds)?;
    let geom = ds.geometry()?;
    let clips: Vec<_> = ds.split(split).collect();
    let reports = par::map_indices(clips.len(), |i| {
        let clip = clips[i];
        let preds = predict_clip(model, store, &ds.basis, &clip.video.frames, pipeline)?;
        let gts: Vec<_> = clip.video.gts.iter().map(|g| g.lanes.clone()).collect();
        Ok(metrics::evaluate_clip(&clip.name, &preds, &gts, &geom, metric))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((metrics::pool(&reports), reports))
}

/// One column set of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub omr: OmrConfig,
    pub augment: bool,
}

impl Variant {
    pub fn full() -> Self {
        Variant {
            name: "full".into(),
            omr: OmrConfig::default(),
            augment: true,
        }
    }

    pub fn no_augmentation() -> Self {
        Variant {
            name: "no-augmentation".into(),
            augment: false,
            ..Self::full()
        }
    }

    pub fn no_obstacle_mask() -> Self {
        Variant {
            name: "no-obstacle-mask".into(),
            omr: OmrConfig {
                use_obstacle_mask: false,
                ..OmrConfig::default()
            },
            augment: true,
        }
    }

    pub fn no_memory() -> Self {
        Variant {
            name: "no-memory".into(),
            omr: OmrConfig {
                use_memory: false,
                ..OmrConfig::default()
            },
            augment: true,
        }
    }

    pub fn matrix() -> Vec<Variant> {
        vec![Self::no_augmentation(), Self::no_obstacle_mask(), Self::no_memory(), Self::full()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub seed: u64,
    pub name: String,
    pub summary: Summary,
}

/// A model trained by [`run_matrix`], with its per-clip evaluation.
pub struct Trained<'a> {
    pub seed: u64,
    pub name: &'a str,
    pub model: &'a ModelConfig,
    pub state: &'a TrainState,
    pub clips: &'a [ClipReport],
}

/// Train step 1 once per seed, evaluate it as the intra-frame baseline
/// ("intra"), then train and evaluate each step-2 variant from it. Every
/// trained model is handed to `sink` before the next one starts.
#[allow(clippy::too_many_arguments)]
pub fn run_matrix(
    model: &ModelConfig,
    ds: &Dataset,
    train: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
    metric: &MetricConfig,
    log: &mut Vec<LossReport>,
    sink: &mut dyn FnMut(Trained) -> Result<()>,
) -> Result<Vec<VariantResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let tcfg = TrainConfig { seed, ..train.clone() };
        let step1 = training::train_step1(model, ds, &tcfg, log)?;
        let (summary, clips) = evaluate(model, &step1.store, ds, Split::Test, Pipeline::Intra, metric)?;
        log::info!("seed {seed} intra: f1 {:.4} r_m {:?}", summary.scores.f1, summary.r_m);
        sink(Trained {
            seed,
            name: "intra",
            model,
            state: &step1,
            clips: &clips,
        })?;
        out.push(VariantResult {
            seed,
            name: "intra".into(),
            summary,
        });
        for v in variants {
            let m = ModelConfig {
                omr: v.omr.clone(),
                ..model.clone()
            };
            let cfg = TrainConfig {
                augment: v.augment,
                ..tcfg.clone()
            };
            let step2 = training::train_step2(&step1.store, &m, ds, &cfg, log)?;
            let (summary, clips) = evaluate(&m, &step2.store, ds, Split::Test, Pipeline::Refined, metric)?;
            log::info!("seed {seed} {}: f1 {:.4} r_m {:?}", v.name, summary.scores.f1, summary.r_m);
            sink(Trained {
                seed,
                name: &v.name,
                model: &m,
                state: &step2,
                clips: &clips,
            })?;
            out.push(VariantResult {
                seed,
                name: v.name.clone(),
                summary,
            });
        }
    }
    Ok(out)
}

/// Mean F1 and R_M of one variant over seeds. An absent R_M counts as 0.
pub fn seed_means(results: &[VariantResult], name: &str) -> Option<(f64, f64)> {
    let rows: Vec<_> = results.iter().filter(|r| r.name == name).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let f1 = rows.iter().map(|r| r.summary.scores.f1).sum::<f64>() / n;
    let rm = rows.iter().map(|r| r.summary.r_m.unwrap_or(0.0)).sum::<f64>() / n;
    Some((f1, rm))
}
