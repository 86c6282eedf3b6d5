use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to re-run a command: the resolved config, seed and inputs,
/// plus digests of what the run wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub config: Value,
    pub inputs: BTreeMap<String, InputRecord>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn record_input(path: &Path) -> Result<InputRecord, Failure> {
    let abs = std::fs::canonicalize(path).map_err(|e| Failure::usage(format!("input {}: {e}", path.display())))?;
    Ok(InputRecord {
        sha256: sha256_file(&abs)?,
        path: abs,
    })
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), Failure> {
        introspect::dataio::write_json(&dir.join(FILE_NAME), self).map_err(Failure::Core)
    }
}
