use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsfp_core::io::write_atomic;

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Command-specific settings that are not part of the config document.
    pub options: serde_json::Value,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: Vec<(String, String)>,
    /// SHA-256 over the command, config, options and input digests.
    pub input_hash: String,
    pub started_at: u64,
    pub finished_at: u64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub exit_code: i32,
    pub version: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Identity of a run, computed before any work happens.
pub struct RunKey {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub options: serde_json::Value,
    pub inputs: Vec<(String, String)>,
    pub hash: String,
}

impl RunKey {
    pub fn new(command: &str, config: &RunConfig, seed: u64, options: serde_json::Value, input_files: &[(&str, PathBuf)]) -> Result<Self, CliError> {
        let inputs = input_files
            .iter()
            .map(|(role, path)| Ok((role.to_string(), file_digest(path)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let canonical = serde_json::to_vec(&(command, config, seed, &options, &inputs)).expect("run key serializes");
        Ok(Self {
            command: command.to_string(),
            config: config.clone(),
            seed,
            options,
            inputs,
            hash: hex(&Sha256::digest(&canonical)),
        })
    }

    pub fn finish(self, started_at: u64, artifacts: Vec<String>, exit_code: i32) -> RunManifest {
        RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            options: self.options,
            inputs: self.inputs,
            input_hash: self.hash,
            started_at,
            finished_at: now(),
            artifacts,
            exit_code,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// What to do with an output directory before running.
#[derive(Debug, PartialEq, Eq)]
pub enum Freshness {
    /// Nothing there yet, or `--force`.
    Run,
    /// The directory already holds this exact run.
    UpToDate,
}

pub fn check_out_dir(out: &Path, key: &RunKey, force: bool) -> Result<Freshness, CliError> {
    let path = out.join(MANIFEST);
    if force || !path.exists() {
        return Ok(Freshness::Run);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let previous: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{} is not a run manifest: {e}; use --force", path.display())))?;
    if previous.input_hash == key.hash && previous.artifacts.iter().all(|a| out.join(a).exists()) {
        return Ok(Freshness::UpToDate);
    }
    Err(CliError::Config(format!(
        "{} holds a different {} run; use --force to overwrite",
        out.display(),
        previous.command
    )))
}

pub fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_atomic(&out.join(MANIFEST), &bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
