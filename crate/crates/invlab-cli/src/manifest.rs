//! Run manifest: enough metadata to reproduce a run from its artifacts.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub artifacts: Vec<PathBuf>,
    pub versions: Versions,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
pub struct Seeds {
    pub data: u64,
    pub eval_data: u64,
    pub train: u64,
}

#[derive(Serialize)]
pub struct Versions {
    pub invlab: String,
    pub cli: String,
}

pub fn config_hash(cfg: &crate::config::RunConfig) -> String {
    let canonical = serde_json::to_string(cfg).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    format!("{:x}", hasher.finalize())
}

impl Manifest {
    pub fn new(command: &str, cfg: &crate::config::RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            config_hash: config_hash(cfg),
            seeds: Seeds {
                data: cfg.data.seed,
                eval_data: cfg.data.eval_seed,
                train: cfg.train.seed,
            },
            artifacts: Vec::new(),
            versions: Versions {
                invlab: env!("CARGO_PKG_VERSION").to_string(),
                cli: env!("CARGO_PKG_VERSION").to_string(),
            },
            wall_seconds: 0.0,
        }
    }

    /// Write atomically (temp file + rename) at the end of a run.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let tmp = dir.join(".manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, dir.join("manifest.json"))?;
        Ok(())
    }
}
