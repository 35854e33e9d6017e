use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Record of one run. Output paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub run_id: String,
    pub seed: u64,
    pub config: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub outputs: Vec<OutputFile>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 40 hex digits of `sha256(kind, seed, config)`.
pub fn run_id(kind: &str, seed: u64, config: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(seed.to_le_bytes());
    h.update(config.as_bytes());
    hex::encode(h.finalize())[..40].to_string()
}

impl RunManifest {
    pub fn new(kind: &str, seed: u64, config: &str) -> Self {
        Self {
            kind: kind.to_string(),
            run_id: run_id(kind, seed, config),
            seed,
            config: config.to_string(),
            timings: BTreeMap::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Writes `bytes` to `dir/rel` and records its checksum.
    pub fn emit(&mut self, dir: &Path, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.outputs.push(OutputFile {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad manifest {}: {e}", path.display())))
    }

    /// Checks that every listed output exists with its recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for out in &self.outputs {
            let bytes = std::fs::read(dir.join(&out.path))
                .map_err(|e| CliError::Io(format!("{}: {e}", out.path)))?;
            if sha256_hex(&bytes) != out.sha256 {
                return Err(CliError::Io(format!("checksum mismatch for {}", out.path)));
            }
        }
        Ok(())
    }
}
