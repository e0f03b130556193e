//! Run directories: `<runs_dir>/<timestamp>-<config hash>/` holding a
//! manifest written before any artifact, a plain-text log and the outputs.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Seeds};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "log.txt";

/// Everything needed to reproduce a run. Deliberately free of wall-clock
/// data so that reruns produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command-specific inputs (paths, prompts, flags).
    pub inputs: serde_json::Value,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, inputs: serde_json::Value, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            inputs,
            config: config.clone(),
            config_hash: config.hash()?,
            seeds: config.seeds.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes the manifest. With `explicit` the
    /// given path is used as is; otherwise a fresh timestamped directory is
    /// made under `config.paths.runs_dir`.
    pub fn create(manifest: &RunManifest, explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => {
                std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
                p.to_path_buf()
            }
            None => fresh_dir(&manifest.config.paths.runs_dir, &manifest.config_hash)?,
        };
        let run = Self { path };
        let file = run.path.join(MANIFEST_FILE);
        std::fs::write(&file, serde_json::to_string_pretty(manifest)? + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path.join(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Appends a line to the run log and mirrors it to tracing.
    pub fn log(&self, line: impl AsRef<str>) -> Result<()> {
        let line = line.as_ref();
        tracing::info!("{line}");
        let file = self.path.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&file)
            .map_err(|e| Error::io(&file, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&file, e))
    }
}

fn fresh_dir(root: &Path, hash: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", &hash[..8]);
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}.{n}") };
        let p = root.join(name);
        match std::fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&p, e)),
        }
    }
    unreachable!("unbounded search always returns")
}
