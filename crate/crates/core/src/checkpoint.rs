//! Versioned checkpoints: a JSON manifest (model config, parameter names,
//! shapes, frozen flags, hashes) next to concatenated tensor blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eigenlane::EigenlaneBasis;
use crate::error::{Error, Result};
use crate::io;
use crate::network::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::optim::{AdamW, AdamWConfig};

const FORMAT: &str = "omr-checkpoint";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub lr: f64,
    pub step: u64,
    pub skipped: u64,
    pub halvings: u32,
    pub best_epoch_loss: Option<f64>,
    pub stale_epochs: usize,
    /// Parameters with moment estimates, in blob order (first `m`, then `v`).
    pub names: Vec<String>,
    pub blob_sha256: String,
}

/// Where a training run stands, for resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// `"step1"` or `"step2"`.
    pub stage: String,
    pub epochs_done: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub params_sha256: String,
    pub basis_sha256: String,
    pub progress: Option<Progress>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub store: ParamStore,
    pub basis: EigenlaneBasis,
    pub progress: Option<Progress>,
    pub optimizer: Option<AdamW>,
}

/// SHA-256 identifying a basis by its contents.
pub fn basis_hash(basis: &EigenlaneBasis) -> String {
    let u = Tensor::from_fn(&[basis.n(), basis.m()], |i| basis.at(i / basis.m(), i % basis.m()));
    io::sha256_hex(&u.to_bytes())
}

/// Write `ckpt` into `dir` (`checkpoint.json`, `params.bin`, `optimizer.bin`,
/// `basis.json`, `basis.bin`).
pub fn save(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let store = &ckpt.store;
    let params: Vec<TensorEntry> = store
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
            frozen: store.is_frozen(n),
        })
        .collect();
    let buffers: Vec<TensorEntry> = store
        .buffers()
        .map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
            frozen: false,
        })
        .collect();
    let tensors: Vec<&Tensor> = store.iter().map(|(_, t)| t).chain(store.buffers().map(|(_, t)| t)).collect();
    let params_sha256 = io::write_tensors(&dir.join("params.bin"), &tensors)?;
    ckpt.basis.save(&dir.join("basis.json"), &dir.join("basis.bin"))?;
    let optimizer = match &ckpt.optimizer {
        None => None,
        Some(opt) => {
            let names: Vec<String> = opt.m.keys().cloned().collect();
            let blobs: Vec<&Tensor> = names.iter().map(|n| &opt.m[n]).chain(names.iter().map(|n| &opt.v[n])).collect();
            let sha = io::write_tensors(&dir.join("optimizer.bin"), &blobs)?;
            Some(OptimizerEntry {
                config: opt.cfg.clone(),
                lr: opt.lr,
                step: opt.step,
                skipped: opt.skipped,
                halvings: opt.halvings,
                best_epoch_loss: opt.best_epoch_loss,
                stale_epochs: opt.stale_epochs,
                names,
                blob_sha256: sha,
            })
        }
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model: ckpt.model.clone(),
        params,
        buffers,
        params_sha256,
        basis_sha256: basis_hash(&ckpt.basis),
        progress: ckpt.progress.clone(),
        optimizer,
    };
    io::write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Incompatible(format!(
            "{} is {} v{}, expected {FORMAT} v{VERSION}",
            dir.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Load a checkpoint, verifying blob hashes and shapes.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    manifest.model.validate()?;
    let tensors = io::read_tensors(&dir.join("params.bin"), Some(&manifest.params_sha256))?;
    if tensors.len() != manifest.params.len() + manifest.buffers.len() {
        return Err(Error::Format("parameter blob does not match the manifest".into()));
    }
    let mut store = ParamStore::new();
    let mut it = tensors.into_iter();
    for e in &manifest.params {
        let t = it.next().expect("length checked");
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("parameter {} has shape {:?}", e.name, t.shape())));
        }
        store.insert(e.name.clone(), t)?;
        if e.frozen {
            store.freeze(&e.name);
        }
    }
    for e in &manifest.buffers {
        let t = it.next().expect("length checked");
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("buffer {} has shape {:?}", e.name, t.shape())));
        }
        store.set_buffer(e.name.clone(), t);
    }
    let basis = EigenlaneBasis::load(&dir.join("basis.json"))?;
    if basis_hash(&basis) != manifest.basis_sha256 {
        return Err(Error::HashMismatch {
            path: dir.join("basis.bin"),
        });
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let blobs = io::read_tensors(&dir.join("optimizer.bin"), Some(&o.blob_sha256))?;
            if blobs.len() != 2 * o.names.len() {
                return Err(Error::Format("optimizer blob does not match the manifest".into()));
            }
            let mut opt = AdamW::new(o.config.clone());
            opt.lr = o.lr;
            opt.step = o.step;
            opt.skipped = o.skipped;
            opt.halvings = o.halvings;
            opt.best_epoch_loss = o.best_epoch_loss;
            opt.stale_epochs = o.stale_epochs;
            let (m, v) = blobs.split_at(o.names.len());
            for (i, n) in o.names.iter().enumerate() {
                opt.m.insert(n.clone(), m[i].clone());
                opt.v.insert(n.clone(), v[i].clone());
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        model: manifest.model,
        store,
        basis,
        progress: manifest.progress,
        optimizer,
    })
}
