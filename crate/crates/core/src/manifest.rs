//! `manifest.json`: what ran, with which configuration, and what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    /// Unix seconds.
    pub started_at: u64,
    pub finished: bool,
    pub outputs: Vec<PathBuf>,
    /// Named phases, seconds.
    pub timings: BTreeMap<String, f64>,
}

/// Keeps `manifest.json` in an output directory current while a command runs.
pub struct ManifestWriter {
    pub manifest: RunManifest,
    path: PathBuf,
    clock: Instant,
}

impl ManifestWriter {
    /// Writes the initial manifest before any work starts.
    pub fn start(
        dir: &Path,
        command: &str,
        args: Vec<String>,
        config: serde_json::Value,
        seed: Option<u64>,
    ) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let started_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let w = Self {
            manifest: RunManifest {
                command: command.to_string(),
                args,
                config,
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                started_at,
                finished: false,
                outputs: Vec::new(),
                timings: BTreeMap::new(),
            },
            path: dir.join(MANIFEST_FILE),
            clock: Instant::now(),
        };
        w.flush()?;
        Ok(w)
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.manifest.outputs.push(path.into());
    }

    pub fn timing(&mut self, name: &str, seconds: f64) {
        self.manifest.timings.insert(name.to_string(), seconds);
    }

    pub fn flush(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let tmp = self.path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }

    /// Records total wall time and marks the run finished.
    pub fn finish(mut self) -> Result<RunManifest> {
        let total = self.clock.elapsed().as_secs_f64();
        self.timing("total", total);
        self.manifest.finished = true;
        self.flush()?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
