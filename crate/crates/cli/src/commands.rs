use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use omr_core::checkpoint::{self, Checkpoint, Progress};
use omr_core::dataset::{self, Dataset, Split};
use omr_core::eigenlane::EigenlaneBasis;
use omr_core::experiment::{self, Pipeline, Trained, Variant, VariantResult};
use omr_core::metrics::{Report, Summary};
use omr_core::network::ModelConfig;
use omr_core::omr::{self, GateVariant, StageTimes};
use omr_core::render;
use omr_core::training::{self, LossReport, TrainState};
use omr_core::{io, Tensor};

use crate::config::{output_path, required, RunConfig};
use crate::exit::{CliError, Code};
use crate::{AblateArgs, EvalArgs, Gates, GenerateArgs, InferArgs, OmrFlags, PipelineArg, SplitArg, TrainArgs};

type Res<T = ()> = Result<T, CliError>;

const LOSS_LOG: &str = "loss_log.jsonl";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(Code::Io, format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Res {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_dataset(dir: &Path) -> Res<Dataset> {
    if !dir.join(dataset::MANIFEST).is_file() {
        return Err(CliError::new(Code::Prerequisite, format!("no dataset at {}", dir.display())));
    }
    Ok(dataset::load(dir)?)
}

fn load_checkpoint(dir: &Path, what: &str) -> Res<Checkpoint> {
    if !dir.join(checkpoint::MANIFEST).is_file() {
        return Err(CliError::new(Code::Prerequisite, format!("no {what} checkpoint at {}", dir.display())));
    }
    Ok(checkpoint::load(dir)?)
}

fn same_basis(ckpt: &EigenlaneBasis, ds: &EigenlaneBasis) -> Res {
    if checkpoint::basis_hash(ckpt) != checkpoint::basis_hash(ds) {
        return Err(CliError::new(Code::Incompatible, "checkpoint was trained with a different eigenlane basis"));
    }
    Ok(())
}

fn apply_omr_flags(model: &mut ModelConfig, f: &OmrFlags) {
    if f.no_obstacle_mask {
        model.omr.use_obstacle_mask = false;
    }
    if f.no_memory {
        model.omr.use_memory = false;
    }
    if let Some(g) = f.gates {
        model.omr.gates = match g {
            Gates::Printed => GateVariant::Printed,
            Gates::Standard => GateVariant::Standard,
        };
    }
}

fn write_loss_log(path: &Path, entries: &[LossReport], append: bool) -> Res {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| CliError::new(Code::Failure, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn save_state(dir: &Path, model: &ModelConfig, basis: &EigenlaneBasis, state: &TrainState, stage: &str, seed: u64) -> Res {
    checkpoint::save(
        &Checkpoint {
            model: model.clone(),
            store: state.store.clone(),
            basis: basis.clone(),
            progress: Some(Progress {
                stage: stage.into(),
                epochs_done: state.epochs_done,
                seed,
            }),
            optimizer: Some(state.optimizer.clone()),
        },
        dir,
    )?;
    Ok(())
}

fn print_summary(label: &str, s: &Summary) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{label:<18} P {:.4}  R {:.4}  F1 {:.4}  mIoU {}  R_F {}  R_M {}  (tp {} fp {} fn {})",
        s.scores.precision,
        s.scores.recall,
        s.scores.f1,
        opt(s.scores.miou),
        opt(s.r_f),
        opt(s.r_m),
        s.counts.tp,
        s.counts.fp,
        s.counts.fn_
    );
}

// --- generate ----------------------------------------------------------------------

pub fn generate(mut cfg: RunConfig, a: GenerateArgs) -> Res {
    cfg.command = "generate".into();
    if let Some(v) = a.seed {
        cfg.dataset.seed = v;
    }
    if let Some(v) = a.train_clips {
        cfg.dataset.train_clips = v;
    }
    if let Some(v) = a.test_clips {
        cfg.dataset.test_clips = v;
    }
    if let Some(v) = a.frames {
        cfg.dataset.frames = v;
    }
    if a.out.is_some() {
        cfg.paths.out = a.out;
    }
    let out = output_path(&required(&cfg.paths.out, "--out")?);
    cfg.paths.out = Some(out.clone());
    cfg.dataset.validate()?;

    if out.exists() {
        let mut entries = fs::read_dir(&out).map_err(|e| io_err(&out, e))?;
        if entries.next().is_some() {
            if !a.force {
                return Err(CliError::new(
                    Code::Input,
                    format!("{} is not empty; pass --force to replace it", out.display()),
                ));
            }
            if !out.join(dataset::MANIFEST).is_file() {
                return Err(CliError::new(
                    Code::Input,
                    format!("{} is not a dataset directory; refusing to replace it", out.display()),
                ));
            }
            fs::remove_dir_all(&out).map_err(|e| io_err(&out, e))?;
        }
    }
    let ds = dataset::build(&cfg.dataset)?;
    dataset::save(&ds, &out)?;
    cfg.write(&out)?;
    let frames: usize = ds.clips.iter().map(|c| c.video.frames.len()).sum();
    let lanes: usize = ds.clips.iter().map(|c| c.spec.lanes.len()).sum();
    let occluders: usize = ds.clips.iter().map(|c| c.spec.occluders.len()).sum();
    println!(
        "wrote {}: {} clips ({} train, {} test), {frames} frames, {lanes} lane tracks, {occluders} occluders",
        out.display(),
        ds.clips.len(),
        ds.split(Split::Train).count(),
        ds.split(Split::Test).count()
    );
    Ok(())
}

// --- train -------------------------------------------------------------------------

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Res {
    cfg.command = format!("train-step{}", a.step);
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        if a.step == 1 {
            cfg.train.step1_epochs = v;
        } else {
            cfg.train.step2_epochs = v;
        }
    }
    if a.no_augment {
        cfg.train.augment = false;
    }
    apply_omr_flags(&mut cfg.model, &a.omr);
    for (slot, flag) in [(&mut cfg.paths.data, a.data), (&mut cfg.paths.out, a.out), (&mut cfg.paths.init, a.init), (&mut cfg.paths.resume, a.resume)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    let data = required(&cfg.paths.data, "--data")?;
    let out = output_path(&required(&cfg.paths.out, "--out")?);
    cfg.paths.out = Some(out.clone());
    cfg.train.validate()?;

    let stage = if a.step == 1 { "step1" } else { "step2" };
    let ds = load_dataset(&data)?;
    let resume = match &cfg.paths.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir, "resume")?;
            let p = ck.progress.clone().ok_or_else(|| CliError::new(Code::Incompatible, "resume checkpoint has no training progress"))?;
            if p.stage != stage {
                return Err(CliError::new(
                    Code::Incompatible,
                    format!("resume checkpoint is from {}, not {stage}", p.stage),
                ));
            }
            Some((ck, p))
        }
        None => None,
    };

    let (model, mut state) = match (a.step, resume) {
        (_, Some((ck, p))) => {
            same_basis(&ck.basis, &ds.basis)?;
            cfg.train.seed = p.seed;
            let optimizer = ck.optimizer.ok_or_else(|| CliError::new(Code::Incompatible, "resume checkpoint has no optimizer state"))?;
            let state = TrainState {
                store: ck.store,
                optimizer,
                epochs_done: p.epochs_done,
            };
            (ck.model, state)
        }
        (1, None) => {
            let state = training::init_step1(&cfg.model, &ds, &cfg.train)?;
            (cfg.model.clone(), state)
        }
        (_, None) => {
            let init = cfg.paths.init.clone().ok_or_else(|| {
                CliError::new(Code::Prerequisite, "step 2 needs a step-1 checkpoint (--init)")
            })?;
            let ck = load_checkpoint(&init, "step-1")?;
            same_basis(&ck.basis, &ds.basis)?;
            // Shapes come from the step-1 checkpoint; the refinement options from the run config.
            let model = ModelConfig {
                omr: cfg.model.omr.clone(),
                ..ck.model
            };
            let state = training::init_step2(&ck.store, &model, &cfg.train)?;
            (model, state)
        }
    };
    training::check_compatible(&model, &ds)?;
    cfg.model = model.clone();
    create_dir(&out)?;
    cfg.write(&out)?;

    let epochs = if a.step == 1 { cfg.train.step1_epochs } else { cfg.train.step2_epochs };
    let log_path = out.join(LOSS_LOG);
    let mut append = cfg.paths.resume.is_some() && log_path.is_file();
    while state.epochs_done < epochs {
        let mut log = Vec::new();
        let mean = if a.step == 1 {
            training::step1_epoch(&mut state, &model, &ds, &cfg.train, &mut log)?
        } else {
            training::step2_epoch(&mut state, &model, &ds, &cfg.train, &mut log)?
        };
        write_loss_log(&log_path, &log, append)?;
        append = true;
        save_state(&out, &model, &ds.basis, &state, stage, cfg.train.seed)?;
        println!("{stage} epoch {}/{epochs}: mean loss {mean:.5}, lr {:.2e}", state.epochs_done, state.optimizer.lr);
    }
    if !out.join(checkpoint::MANIFEST).is_file() {
        save_state(&out, &model, &ds.basis, &state, stage, cfg.train.seed)?;
    }
    println!("checkpoint: {}", out.display());
    Ok(())
}

// --- eval --------------------------------------------------------------------------

/// Mean absolute activation per pixel, as a one-channel map.
fn energy(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw().expect("feature maps are CHW");
    Tensor::from_fn(&[1, h, w], |q| (0..c).map(|k| t.data()[k * h * w + q].abs()).sum::<f64>() / c as f64)
}

fn render_clip(dir: &Path, model: &ModelConfig, ck: &Checkpoint, basis: &EigenlaneBasis, clip: &dataset::Clip) -> Res {
    let geom = model.geometry()?;
    let refined = omr::process_video(model, &ck.store, basis, &clip.video.frames)?;
    let intra = omr::process_intra(model, &ck.store, basis, &clip.video.frames)?;
    let scale = omr_core::network::GRID_STRIDE;
    for (t, (r, i)) in refined.iter().zip(&intra).enumerate() {
        let gt: Vec<_> = clip.video.gts[t].lanes.iter().map(|l| &l.curve).collect();
        let pred: Vec<_> = r.lanes.lanes.iter().map(|l| &l.curve).collect();
        let img = render::overlay_lanes(&clip.video.frames[t], &geom, &gt, [0.0, 1.0, 0.0])?;
        let img = render::overlay_lanes(&img, &geom, &pred, [1.0, 0.0, 0.0])?;
        let images = [
            ("overlay", img),
            ("o", render::map_image(&r.intra.o, 0, scale)?),
            ("f_tilde", render::map_image(&energy(&r.intra.f_tilde), 0, scale)?),
            ("f", render::map_image(&energy(&r.f), 0, scale)?),
            ("p_tilde", render::map_image(&i.p, 0, scale)?),
            ("p", render::map_image(&r.p, 0, scale)?),
        ];
        for (name, image) in images {
            render::write_ppm(&dir.join(format!("frame{t:03}_{name}.ppm")), &image)?;
        }
    }
    Ok(())
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> Res {
    cfg.command = "eval".into();
    for (slot, flag) in [(&mut cfg.paths.data, a.data), (&mut cfg.paths.checkpoint, a.checkpoint), (&mut cfg.paths.out, a.out)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    let data = required(&cfg.paths.data, "--data")?;
    let ck_dir = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let out = output_path(&required(&cfg.paths.out, "--out")?);
    cfg.paths.out = Some(out.clone());
    let ds = load_dataset(&data)?;
    let ck = load_checkpoint(&ck_dir, "model")?;
    same_basis(&ck.basis, &ds.basis)?;
    let pipeline = match a.pipeline {
        PipelineArg::Intra => Pipeline::Intra,
        PipelineArg::Refined => Pipeline::Refined,
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    cfg.model = ck.model.clone();
    let (overall, clips) = experiment::evaluate(&ck.model, &ck.store, &ds, split, pipeline, &cfg.metric)?;
    create_dir(&out)?;
    cfg.write(&out)?;
    let report = Report {
        label: a.label.unwrap_or_else(|| format!("{pipeline:?}").to_lowercase()),
        dataset_sha256: dataset::dataset_hash(&data)?,
        checkpoint_sha256: checkpoint::read_manifest(&ck_dir)?.params_sha256,
        metric: cfg.metric.clone(),
        overall,
        clips,
    };
    io::write_json(&out.join("report.json"), &report)?;
    for c in &report.clips {
        print_summary(&c.name, &c.summary);
    }
    print_summary("overall", &report.overall);
    if a.render {
        for clip in ds.split(split) {
            render_clip(&out.join("render").join(&clip.name), &ck.model, &ck, &ds.basis, clip)?;
        }
    }
    Ok(())
}

// --- infer -------------------------------------------------------------------------

#[derive(Serialize)]
struct LaneOut {
    rows: Vec<f64>,
    xs: Vec<f64>,
    valid: (usize, usize),
    score: f64,
}

#[derive(Serialize)]
struct FrameLanesOut {
    frame: usize,
    lanes: Vec<LaneOut>,
}

/// Seconds per frame of each stage.
#[derive(Serialize)]
struct Timing {
    #[serde(rename = "Encoding")]
    encoding: f64,
    #[serde(rename = "LOD")]
    lod: f64,
    #[serde(rename = "OMR")]
    omr: f64,
    #[serde(rename = "Decoding")]
    decoding: f64,
    #[serde(rename = "Total")]
    total: f64,
}

#[derive(Serialize)]
struct TimingReport {
    frames: usize,
    seconds_per_frame: Timing,
}

fn read_frames(clip: &Path) -> Res<Vec<Tensor>> {
    let path = if clip.is_dir() { clip.join("frames.bin") } else { clip.to_path_buf() };
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    io::decode_tensors(&bytes).map_err(|e| CliError::new(Code::Io, format!("{}: {e}", path.display())))
}

pub fn infer(mut cfg: RunConfig, a: InferArgs) -> Res {
    cfg.command = "infer".into();
    for (slot, flag) in [(&mut cfg.paths.checkpoint, a.checkpoint), (&mut cfg.paths.clip, a.clip), (&mut cfg.paths.out, a.out)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    let ck_dir = required(&cfg.paths.checkpoint, "--checkpoint")?;
    let clip = required(&cfg.paths.clip, "--clip")?;
    let out = output_path(&required(&cfg.paths.out, "--out")?);
    cfg.paths.out = Some(out.clone());
    let ck = load_checkpoint(&ck_dir, "model")?;
    let frames = read_frames(&clip)?;
    if frames.is_empty() {
        return Err(CliError::new(Code::Input, "clip has no frames"));
    }
    cfg.model = ck.model.clone();
    let geom = ck.model.geometry()?;
    let mut stream = omr::VideoStream::new(&ck.model, &ck.store, &ck.basis)?;
    let mut times = StageTimes::default();
    let mut lines = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let o = stream.push_frame(frame)?;
        times.add(&o.times);
        lines.push(FrameLanesOut {
            frame: t,
            lanes: o
                .lanes
                .lanes
                .iter()
                .map(|l| LaneOut {
                    rows: geom.rows.clone(),
                    xs: l.curve.xs.clone(),
                    valid: l.curve.valid,
                    score: l.score,
                })
                .collect(),
        });
    }
    create_dir(&out)?;
    cfg.write(&out)?;
    let lane_path = out.join("lanes.jsonl");
    let file = File::create(&lane_path).map_err(|e| io_err(&lane_path, e))?;
    let mut w = BufWriter::new(file);
    for l in &lines {
        let s = serde_json::to_string(l).map_err(|e| CliError::new(Code::Failure, e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| io_err(&lane_path, e))?;
    }
    w.flush().map_err(|e| io_err(&lane_path, e))?;
    let n = frames.len() as f64;
    let per = |d: std::time::Duration| d.as_secs_f64() / n;
    let timing = TimingReport {
        frames: frames.len(),
        seconds_per_frame: Timing {
            encoding: per(times.encoding),
            lod: per(times.obstacle),
            omr: per(times.omr),
            decoding: per(times.decoding),
            total: per(times.total()),
        },
    };
    io::write_json(&out.join("timing.json"), &timing)?;
    let s = &timing.seconds_per_frame;
    println!(
        "{} frames  Encoding {:.4}s  LOD {:.4}s  OMR {:.4}s  Decoding {:.4}s  Total {:.4}s per frame",
        frames.len(),
        s.encoding,
        s.lod,
        s.omr,
        s.decoding,
        s.total
    );
    Ok(())
}

// --- ablate ------------------------------------------------------------------------

fn variant(name: &str) -> Res<Variant> {
    Ok(match name {
        "full" => Variant::full(),
        "no-augmentation" => Variant::no_augmentation(),
        "no-obstacle-mask" => Variant::no_obstacle_mask(),
        "no-memory" => Variant::no_memory(),
        other => return Err(CliError::new(Code::Input, format!("unknown variant `{other}`"))),
    })
}

#[derive(Serialize)]
struct MeanRow {
    name: String,
    f1: f64,
    r_m: f64,
}

#[derive(Serialize)]
struct AblationReport {
    dataset_sha256: String,
    seeds: Vec<u64>,
    results: Vec<VariantResult>,
    means: Vec<MeanRow>,
}

pub fn ablate(mut cfg: RunConfig, a: AblateArgs) -> Res {
    cfg.command = "ablate".into();
    if let Some(s) = a.seeds {
        cfg.ablation.seeds = s;
    }
    if let Some(v) = a.variants {
        cfg.ablation.variants = v;
    }
    if let Some(e) = a.step1_epochs {
        cfg.train.step1_epochs = e;
    }
    if let Some(e) = a.step2_epochs {
        cfg.train.step2_epochs = e;
    }
    for (slot, flag) in [(&mut cfg.paths.data, a.data), (&mut cfg.paths.out, a.out)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    let data = required(&cfg.paths.data, "--data")?;
    let out = output_path(&required(&cfg.paths.out, "--out")?);
    cfg.paths.out = Some(out.clone());
    if cfg.ablation.seeds.is_empty() {
        return Err(CliError::new(Code::Input, "no seeds given"));
    }
    let variants = cfg.ablation.variants.iter().map(|v| variant(v)).collect::<Res<Vec<_>>>()?;
    cfg.train.validate()?;
    let ds = load_dataset(&data)?;
    training::check_compatible(&cfg.model, &ds)?;
    let dataset_sha256 = dataset::dataset_hash(&data)?;
    create_dir(&out)?;
    cfg.write(&out)?;

    let mut log = Vec::new();
    let metric = cfg.metric.clone();
    let mut sink = |t: Trained| -> omr_core::Result<()> {
        let dir = out.join(format!("seed-{}", t.seed)).join(t.name);
        let stage = if t.name == "intra" { "step1" } else { "step2" };
        save_state(&dir, t.model, &ds.basis, t.state, stage, t.seed).map_err(|e| omr_core::Error::Input(e.message))?;
        let report = Report {
            label: t.name.to_string(),
            dataset_sha256: dataset_sha256.clone(),
            checkpoint_sha256: checkpoint::read_manifest(&dir)?.params_sha256,
            metric: metric.clone(),
            overall: omr_core::metrics::pool(t.clips),
            clips: t.clips.to_vec(),
        };
        io::write_json(&dir.join("report.json"), &report)?;
        print_summary(&format!("seed {} {}", t.seed, t.name), &report.overall);
        Ok(())
    };
    let results = experiment::run_matrix(
        &cfg.model,
        &ds,
        &cfg.train,
        &cfg.ablation.seeds,
        &variants,
        &cfg.metric,
        &mut log,
        &mut sink,
    )?;
    write_loss_log(&out.join(LOSS_LOG), &log, false)?;
    let names = std::iter::once("intra".to_string()).chain(variants.iter().map(|v| v.name.clone()));
    let means: Vec<MeanRow> = names
        .filter_map(|name| experiment::seed_means(&results, &name).map(|(f1, r_m)| MeanRow { name, f1, r_m }))
        .collect();
    println!("mean over {} seeds:", cfg.ablation.seeds.len());
    for m in &means {
        println!("  {:<18} F1 {:.4}  R_M {:.4}", m.name, m.f1, m.r_m);
    }
    io::write_json(
        &out.join("ablation.json"),
        &AblationReport {
            dataset_sha256,
            seeds: cfg.ablation.seeds.clone(),
            results,
            means,
        },
    )?;
    Ok(())
}
