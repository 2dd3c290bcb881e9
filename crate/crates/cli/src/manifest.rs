//! Run manifests: every command writes exactly one `run_manifest.json` into
//! its artifact directory, echoing the command, the full effective config,
//! the seed, the code version, and the paths involved. The wall-clock stamp
//! makes manifests an audit trail; reproducibility comparisons therefore
//! exclude this one file and compare the data artifacts, which are
//! byte-identical across reruns.

use harmonizer_core::{Error, Result};
use serde::Serialize;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_unix: f64,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        inputs: &[&Path],
        outputs: &[&str],
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            wall_clock_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        }
    }

    /// Writes `run_manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
