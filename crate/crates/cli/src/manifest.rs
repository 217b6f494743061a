use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use recomp::imaging::store::{write_atomic, write_json_atomic};
use recomp::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_COPY: &str = "config.toml";
pub const MANIFEST: &str = "run_manifest.json";

/// Provenance record written at the end of every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the stored `config.toml`.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct RunRecorder {
    command: String,
    started_at: f64,
    config_hash: String,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    /// Stores the effective config next to the outputs and starts the clock.
    pub fn start(
        command: &str,
        out_dir: &Path,
        config_toml: &str,
        seed: Option<u64>,
    ) -> Result<Self> {
        write_atomic(&out_dir.join(CONFIG_COPY), config_toml.as_bytes())?;
        Ok(Self {
            command: command.to_string(),
            started_at: now(),
            config_hash: sha256_hex(config_toml.as_bytes()),
            seed,
            outputs: vec![out_dir.join(CONFIG_COPY)],
        })
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn finish(self, out_dir: &Path) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            config_hash: self.config_hash,
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: now(),
            outputs: self.outputs,
        };
        write_json_atomic(&out_dir.join(MANIFEST), &m)?;
        Ok(m)
    }
}
