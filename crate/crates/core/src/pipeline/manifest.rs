//! Per-stage record of what went in and what came out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::spt::write_atomic;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Output entries whose file is missing or no longer matches its hash.
    pub fn stale_outputs(&self) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter(|a| Artifact::of(&a.path).map(|now| now.sha256 != a.sha256).unwrap_or(true))
            .map(|a| a.path.clone())
            .collect()
    }
}
