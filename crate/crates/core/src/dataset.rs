//! Synthetic datasets: train/test clips sharing one eigenlane basis, with an
//! on-disk format of per-clip directories under a hashed manifest.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eigenlane::{fit_basis, EigenlaneBasis, LaneCurve};
use crate::error::{Error, Result};
use crate::geometry::LaneGeometry;
use crate::io;
use crate::network::GRID_STRIDE;
use crate::rng;
use crate::scenegen::{self, GroundTruth, GtLane, OcclusionProfile, SceneRanges, SceneSpec, Video};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub n_rows: usize,
    pub horizon: f64,
    pub m: usize,
    pub frames: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub train: SceneRanges,
    pub test: SceneRanges,
    /// GT stripe width in grid pixels.
    pub stripe_width: f64,
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        DatasetConfig {
            seed,
            image_height: 96,
            image_width: 160,
            n_rows: 36,
            horizon: 30.0,
            m: 6,
            frames: 8,
            train_clips: 24,
            test_clips: 20,
            train: SceneRanges {
                min_lanes: 2,
                max_lanes: 4,
                occlusion: OcclusionProfile::light(),
            },
            test: SceneRanges {
                min_lanes: 2,
                max_lanes: 4,
                occlusion: OcclusionProfile::heavy(),
            },
            stripe_width: 4.0,
        }
    }

    pub fn geometry(&self) -> Result<LaneGeometry> {
        LaneGeometry::new(self.image_height, self.image_width, GRID_STRIDE, self.n_rows, self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_clips == 0 && self.test_clips == 0 {
            return Err(Error::Input("dataset must contain at least one clip".into()));
        }
        if self.train_clips == 0 {
            return Err(Error::Input("the eigenlane basis needs at least one training clip".into()));
        }
        if self.frames == 0 {
            return Err(Error::Input("clips need at least one frame".into()));
        }
        for r in [&self.train, &self.test] {
            if r.min_lanes > r.max_lanes || r.occlusion.min_count > r.occlusion.max_count {
                return Err(Error::Input("empty lane or occluder count range".into()));
            }
            if r.occlusion.min_width > r.occlusion.max_width || r.occlusion.min_width <= 0.0 {
                return Err(Error::Input("bad occluder width range".into()));
            }
        }
        self.geometry().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub name: String,
    pub split: Split,
    pub spec: SceneSpec,
    pub video: Video,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub basis: EigenlaneBasis,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn geometry(&self) -> Result<LaneGeometry> {
        self.config.geometry()
    }
}

fn sample_specs(cfg: &DatasetConfig, geom: &LaneGeometry, split: Split, count: usize) -> Vec<SceneSpec> {
    let ranges = match split {
        Split::Train => &cfg.train,
        Split::Test => &cfg.test,
    };
    (0..count)
        .map(|i| {
            let mut r = rng::stream(cfg.seed, "datagen", &[split.index(), i as u64]);
            let clip_seed: u64 = r.gen();
            scenegen::sample_scene(&mut r, clip_seed, cfg.frames, geom, ranges)
        })
        .collect()
}

/// Every lane of every frame of `specs`, for basis fitting.
pub fn training_lanes(specs: &[SceneSpec], geom: &LaneGeometry) -> Vec<LaneCurve> {
    specs
        .iter()
        .flat_map(|s| (0..s.num_frames).flat_map(move |t| s.lane_curves(geom, t)))
        .map(|(_, c)| c)
        .collect()
}

/// Sample, fit the basis on the training lanes, and render every clip.
pub fn build(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let train = sample_specs(cfg, &geom, Split::Train, cfg.train_clips);
    let test = sample_specs(cfg, &geom, Split::Test, cfg.test_clips);
    let basis = fit_basis(&training_lanes(&train, &geom), cfg.m)?;
    let mut clips = Vec::with_capacity(train.len() + test.len());
    for (split, specs) in [(Split::Train, train), (Split::Test, test)] {
        for (i, spec) in specs.into_iter().enumerate() {
            let video = scenegen::generate_video(&spec, &basis, &geom, cfg.stripe_width)?;
            clips.push(Clip {
                name: format!("{}_{i:04}", split.name()),
                split,
                spec,
                video,
            });
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        basis,
        clips,
    })
}

// --- on-disk format -------------------------------------------------------------

const DATASET_FORMAT: &str = "omr-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub basis: String,
    pub clips: Vec<ClipEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    pub split: Split,
    pub frames: usize,
    pub track_ids: Vec<u32>,
    pub occluder_ids: Vec<u32>,
    pub spec_sha256: String,
    pub frames_sha256: String,
    pub gt_sha256: String,
    pub lanes_sha256: String,
}

/// Per-frame lane list of a clip.
#[derive(Serialize, Deserialize)]
struct FrameLanes {
    frame: usize,
    lanes: Vec<GtLane>,
}

pub const MANIFEST: &str = "manifest.json";

fn write_hashed(path: &Path, bytes: &[u8]) -> Result<String> {
    io::write_bytes(path, bytes)?;
    Ok(io::sha256_hex(bytes))
}

fn read_hashed(path: &Path, sha: &str) -> Result<Vec<u8>> {
    let bytes = io::read_bytes(path)?;
    if io::sha256_hex(&bytes) != sha {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
        });
    }
    Ok(bytes)
}

/// Write the dataset under `dir`: `manifest.json`, the basis, and one
/// directory per clip holding `spec.json`, `frames.bin`, `gt.bin`, `lanes.json`.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.basis.save(&dir.join("basis.json"), &dir.join("basis.bin"))?;
    let mut entries = Vec::with_capacity(ds.clips.len());
    for clip in &ds.clips {
        let cdir = dir.join(&clip.name);
        let spec_sha = write_hashed(&cdir.join("spec.json"), &io::to_json_bytes(&clip.spec)?)?;
        let frames: Vec<&Tensor> = clip.video.frames.iter().collect();
        let frames_sha = write_hashed(&cdir.join("frames.bin"), &io::encode_tensors(&frames))?;
        let gt: Vec<&Tensor> = clip
            .video
            .gts
            .iter()
            .flat_map(|g| [&g.p, &g.c, &g.s, &g.owner])
            .collect();
        let gt_sha = write_hashed(&cdir.join("gt.bin"), &io::encode_tensors(&gt))?;
        let lanes: Vec<FrameLanes> = clip
            .video
            .gts
            .iter()
            .enumerate()
            .map(|(frame, g)| FrameLanes {
                frame,
                lanes: g.lanes.clone(),
            })
            .collect();
        let lanes_sha = write_hashed(&cdir.join("lanes.json"), &io::to_json_bytes(&lanes)?)?;
        entries.push(ClipEntry {
            name: clip.name.clone(),
            split: clip.split,
            frames: clip.video.frames.len(),
            track_ids: clip.spec.lanes.iter().map(|l| l.id).collect(),
            occluder_ids: clip.spec.occluders.iter().map(|o| o.id).collect(),
            spec_sha256: spec_sha,
            frames_sha256: frames_sha,
            gt_sha256: gt_sha,
            lanes_sha256: lanes_sha,
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        config: ds.config.clone(),
        basis: "basis.json".into(),
        clips: entries,
    };
    io::write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST))?;
    if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
        return Err(Error::Incompatible(format!(
            "{} is {} v{}, expected {DATASET_FORMAT} v{DATASET_VERSION}",
            dir.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

/// SHA-256 of the manifest file, identifying a dataset in reports.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    Ok(io::sha256_hex(&io::read_bytes(&dir.join(MANIFEST))?))
}

/// Load a dataset, verifying every content hash.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let basis = EigenlaneBasis::load(&dir.join(&manifest.basis))?;
    let (m, n) = (manifest.config.m, manifest.config.n_rows);
    if basis.m() != m || basis.n() != n {
        return Err(Error::Incompatible("basis does not match the dataset config".into()));
    }
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let cdir = dir.join(&e.name);
        let spec_bytes = read_hashed(&cdir.join("spec.json"), &e.spec_sha256)?;
        let spec: SceneSpec =
            serde_json::from_slice(&spec_bytes).map_err(|err| Error::json(cdir.join("spec.json"), err))?;
        let frames = io::decode_tensors(&read_hashed(&cdir.join("frames.bin"), &e.frames_sha256)?)?;
        let gt = io::decode_tensors(&read_hashed(&cdir.join("gt.bin"), &e.gt_sha256)?)?;
        let lanes_bytes = read_hashed(&cdir.join("lanes.json"), &e.lanes_sha256)?;
        let lanes: Vec<FrameLanes> =
            serde_json::from_slice(&lanes_bytes).map_err(|err| Error::json(cdir.join("lanes.json"), err))?;
        if frames.len() != e.frames || gt.len() != 4 * e.frames || lanes.len() != e.frames {
            return Err(Error::Format(format!("clip {} has inconsistent frame counts", e.name)));
        }
        let mut gts = Vec::with_capacity(e.frames);
        let mut it = gt.into_iter();
        for fl in lanes {
            let mut next = || it.next().expect("length checked");
            gts.push(GroundTruth {
                p: next(),
                c: next(),
                s: next(),
                owner: next(),
                lanes: fl.lanes,
            });
        }
        clips.push(Clip {
            name: e.name.clone(),
            split: e.split,
            spec,
            video: Video { frames, gts },
        });
    }
    Ok(Dataset {
        config: manifest.config,
        basis,
        clips,
    })
}
