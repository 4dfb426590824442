//! Run manifests: every artifact directory records exactly how it was
//! produced. Reruns with identical manifest inputs (command, config hash,
//! seed) reproduce identical artifacts; only the timestamps differ.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// The verb plus its effective arguments.
    pub command: String,
    pub config_path: PathBuf,
    /// Content hash of the config file the run actually used.
    pub config_hash: String,
    pub seed: u64,
    /// Build identifier of the binary that produced the artifacts.
    pub build: String,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn build_id() -> String {
    format!("lsgc {}", env!("CARGO_PKG_VERSION"))
}

impl RunManifest {
    pub fn start(command: String, config_path: &Path, config_hash: &str, seed: u64, out_dir: &Path) -> Self {
        Self {
            command,
            config_path: config_path.to_owned(),
            config_hash: config_hash.to_owned(),
            seed,
            build: build_id(),
            out_dir: out_dir.to_owned(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    /// Stamps the end time and writes the manifest into the output
    /// directory. One manifest per artifact directory.
    pub fn finish(mut self) -> Result<(), CliError> {
        self.finished_unix = now_unix();
        let path = self.out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Io(format!("manifest encode: {e}")))?;
        std::fs::write(&path, json + "\n")
            .map_err(|e| CliError::Io(format!("manifest {}: {e}", path.display())))?;
        Ok(())
    }

}
