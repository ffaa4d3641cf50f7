//! Per-run manifest, rewritten atomically when a command starts and ends.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use enas_unet_core::search::Clock;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsutil::write_json;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Every resolved setting, defaults included.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// A manifest bound to the file it is written to.
pub struct Run {
    path: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    pub fn start(path: &Path, command: &str, config: serde_json::Value, seeds: Vec<u64>, outputs: Vec<PathBuf>) -> Result<Self> {
        let run = Run {
            path: path.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                config,
                seeds,
                tool_version: TOOL_VERSION.into(),
                started: unix_now(),
                finished: None,
                status: RunStatus::Running,
                error: None,
                outputs,
            },
        };
        write_json(&run.path, &run.manifest)?;
        Ok(run)
    }

    pub fn finish<T>(mut self, outcome: &Result<T>) -> Result<()> {
        self.manifest.finished = Some(unix_now());
        match outcome {
            Ok(_) => self.manifest.status = RunStatus::Succeeded,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(e.to_string());
            }
        }
        write_json(&self.path, &self.manifest)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Wall clock for search timing.
pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
