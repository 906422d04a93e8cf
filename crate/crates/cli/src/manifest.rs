use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use budgetseg_core::pipeline::{config_hash, ExperimentConfig, Seeds};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Written next to every output; holds enough to re-run the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub toolkit_version: String,
    pub seeds: Seeds,
    pub config: ExperimentConfig,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash(config),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: config.seeds,
            config: config.clone(),
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: None,
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn finish(&mut self, result: Result<(), String>) {
        self.finished_unix = Some(now_unix());
        match result {
            Ok(()) => self.status = RunStatus::Complete,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e);
            }
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn read(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }
}
