use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one invocation. Artifact paths are relative to the directory
/// holding the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub scenario: String,
    pub config: Resolved,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub toolkit_version: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, config: Resolved, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            scenario: config.scenario.name.as_str().to_string(),
            config_hash: config.hash(),
            config,
            seeds,
            artifacts: vec![MANIFEST_FILE.to_string()],
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
        }
    }

    pub fn add(&mut self, artifact: impl Into<String>) {
        let a = artifact.into();
        if !self.artifacts.contains(&a) {
            self.artifacts.push(a);
        }
    }

    pub fn finish(&mut self, status: &str) {
        self.status = status.to_string();
        self.finished_unix = Some(unix_now());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(CliError::io(&path))?;
        Ok(path)
    }
}

pub fn write_file(dir: &Path, rel: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    std::fs::write(&path, contents).map_err(CliError::io(&path))
}
