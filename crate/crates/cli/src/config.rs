//! The `--config` TOML file. Every command-line flag maps onto one of these
//! fields; flags win over the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use trisect_core::evaluation::{ProbeConfig, DEFAULT_SWEEP};
use trisect_core::training::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub ks: Vec<usize>,
    /// Unlabelled images for pretraining at each K.
    pub pretrain_root: Option<PathBuf>,
    /// One sub-folder per class.
    pub labelled_root: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ks: DEFAULT_SWEEP.to_vec(),
            pretrain_root: None,
            labelled_root: None,
            output: PathBuf::from("sweep.csv"),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub bind: Option<String>,
    pub checkpoint: Option<PathBuf>,
    /// Seconds.
    pub session_ttl: Option<u64>,
    pub max_upload: Option<usize>,
    pub max_side: Option<u32>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
