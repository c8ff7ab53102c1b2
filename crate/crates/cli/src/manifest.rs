//! Run manifest written after every other output of a command.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the resolved configuration, as canonical JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub dataset: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub tool_version: String,
}

/// Hash of a serializable config. `serde_json` keeps struct field order, so
/// equal configs give equal bytes.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            config_hash: config_hash(&config),
            config,
            seeds: Vec::new(),
            dataset: None,
            checkpoints: Vec::new(),
            reports: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    /// Check that every listed file exists, then write `manifest.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        self.write_named(dir, "manifest.json")
    }

    pub fn write_named(&self, dir: &Path, name: &str) -> Result<PathBuf, CliError> {
        for p in self.checkpoints.iter().chain(&self.reports).chain(&self.dataset) {
            if !p.exists() {
                return Err(CliError::Io(format!("manifest names a missing file: {}", p.display())));
            }
        }
        let path = dir.join(name);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        snare_core::files::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
