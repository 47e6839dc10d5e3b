//! Run manifests: enough resolved state to replay any successful run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Written atomically next to the primary output of every successful run.
/// Re-running the recorded subcommand with the recorded config and inputs
/// reproduces the outputs bit for bit.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    subcommand: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    started: Instant,
    started_at: String,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Data(format!("read {}: {e}", path.display())))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: hex::encode(hasher.finalize()),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Serialize and atomically move into place as `<primary>.run.json`
    /// (or `run.json` inside a directory output).
    pub fn write(self, primary_output: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: "lcrisk".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand,
            command: std::env::args().collect(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            started_at: self.started_at,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let dest = if primary_output.is_dir() {
            primary_output.join("run.json")
        } else {
            let mut name = primary_output
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_else(|| "run".into());
            name.push_str(".run.json");
            primary_output.with_file_name(name)
        };
        let dir = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Data(format!("serialize run manifest: {e}")))?;
        let tmp = tempfile::NamedTempFile::new_in(dir)
            .map_err(|e| CliError::Data(format!("create temp manifest: {e}")))?;
        std::fs::write(tmp.path(), text)
            .map_err(|e| CliError::Data(format!("write run manifest: {e}")))?;
        tmp.persist(&dest)
            .map_err(|e| CliError::Data(format!("persist run manifest: {e}")))?;
        Ok(())
    }
}
