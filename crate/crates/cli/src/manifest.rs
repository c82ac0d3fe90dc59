//! Run manifests: enough provenance to re-execute a run.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub cli_version: String,
    pub core_version: String,
    pub archive_format_version: u32,
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved configuration (absolute paths), when the command used one.
    pub config: Option<RunConfig>,
    /// SHA-256 of the configuration's canonical JSON form.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub outputs: Vec<OutputFile>,
    /// Command-specific facts (e.g. pre-fitted decay rates).
    pub details: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

impl Manifest {
    pub fn new(command: &str, config: Option<&RunConfig>, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            tool: "exdf".into(),
            cli_version: env!("CARGO_PKG_VERSION").into(),
            core_version: exdf_core::VERSION.into(),
            archive_format_version: exdf_core::archive::FORMAT_VERSION,
            command: command.into(),
            argv: std::env::args().collect(),
            config: config.cloned(),
            config_hash: config.map(config_hash).transpose()?,
            seed,
            threads: exdf_core::par::current_threads(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        })
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.outputs.push(OutputFile { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        exdf_core::archive::write_atomic(path, |w| Ok(w.write_all(&json)?))
            .with_context(|| format!("writing manifest {}", path.display()))?;
        log::info!("wrote manifest {}", path.display());
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| crate::Invalid(format!("manifest {}: {e}", path.display())).into())
    }
}

/// Manifest location for an output file: `out/posterior.bin` gets
/// `out/posterior.bin.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
