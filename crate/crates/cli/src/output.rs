//! Run-directory writes: atomic files and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use tabdl::{Error, Result};

use crate::config::RunConfig;

/// Write via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Single owner of a run directory: records artifacts and timings, then
/// writes `manifest.json` last.
pub struct RunDir {
    pub root: PathBuf,
    started: Instant,
    artifacts: Vec<PathBuf>,
    timings: Vec<(String, f64)>,
}

impl RunDir {
    pub fn create(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root, started: Instant::now(), artifacts: Vec::new(), timings: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn record(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        self.record(p.clone());
        Ok(p)
    }

    pub fn time<T>(&mut self, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.timings.push((label.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }

    pub fn finish(self, command: &str, config: &RunConfig, metrics: serde_json::Value) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            toolkit_version: &'a str,
            resolved_config: &'a RunConfig,
            timings_seconds: serde_json::Map<String, serde_json::Value>,
            artifacts: Vec<String>,
            metrics: serde_json::Value,
        }
        let mut timings: serde_json::Map<String, serde_json::Value> =
            self.timings.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
        timings.insert("total".into(), self.started.elapsed().as_secs_f64().into());
        let artifacts = self
            .artifacts
            .iter()
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).display().to_string())
            .collect();
        let m = Manifest { command, toolkit_version: env!("CARGO_PKG_VERSION"), resolved_config: config, timings_seconds: timings, artifacts, metrics };
        let path = self.root.join("manifest.json");
        write_json(&path, &m)?;
        Ok(path)
    }
}
