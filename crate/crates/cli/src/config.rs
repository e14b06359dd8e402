//! Resolved run configuration, written next to every command's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use omr_core::dataset::DatasetConfig;
use omr_core::metrics::MetricConfig;
use omr_core::network::ModelConfig;
use omr_core::training::TrainConfig;

use crate::exit::{CliError, Code};

/// Relative output paths are resolved under this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "OMR_OUTPUT_ROOT";
pub const RUN_CONFIG: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metric: MetricConfig,
    pub ablation: AblationConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            dataset: DatasetConfig::desk(7),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            metric: MetricConfig::default(),
            ablation: AblationConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3],
            variants: ["no-augmentation", "no-obstacle-mask", "no-memory", "full"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub clip: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, or the file at `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let bytes = std::fs::read(path).map_err(|e| CliError::new(Code::Io, format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::new(Code::Input, format!("bad config {}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        omr_core::io::write_json(&dir.join(RUN_CONFIG), self).map_err(CliError::from)
    }
}

/// Apply the output-root variable to a relative path.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    p.clone().ok_or_else(|| CliError::new(Code::Input, format!("missing {flag}")))
}
