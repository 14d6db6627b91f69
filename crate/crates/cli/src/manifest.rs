//! Provenance record written next to every command's artifacts.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InputRecord {
    pub role: String,
    /// File path as given, or a `synthetic:` description.
    pub source: String,
    pub sha256: String,
}

impl InputRecord {
    pub fn from_bytes(role: &str, source: impl Into<String>, bytes: &[u8]) -> Self {
        InputRecord {
            role: role.into(),
            source: source.into(),
            sha256: sha256_hex(bytes),
        }
    }

    pub fn from_file(role: &str, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Ok(Self::from_bytes(role, path.display().to_string(), &bytes))
    }
}

/// No timestamps, so reruns produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub synthetic_data: bool,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            synthetic_data: false,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
