//! Run manifests written beside every artifact.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::Result;
use crate::fsutil::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub host: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifact: String,
    pub config: AppConfig,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn host_description() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let name = std::fs::read_to_string("/etc/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let mut s = format!("{}-{} threads={threads}", std::env::consts::ARCH, std::env::consts::OS);
    if !name.is_empty() {
        s.push_str(&format!(" name={name}"));
    }
    s
}

/// `samples.trpl` → `samples.trpl.manifest.toml`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    artifact.with_file_name(name)
}

impl RunManifest {
    pub fn new(command: &str, config: &AppConfig, artifact: &Path, started_unix: f64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            host: host_description(),
            started_unix,
            finished_unix: now_unix(),
            artifact: artifact.display().to_string(),
            config: config.clone(),
        }
    }

    pub fn write(&self, artifact: &Path) -> Result<PathBuf> {
        let path = manifest_path(artifact);
        let text = toml::to_string(self).expect("manifest serializes");
        atomic_write(&path, text.as_bytes())?;
        Ok(path)
    }
}
