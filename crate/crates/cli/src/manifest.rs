//! Run manifests written next to each command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use probefield::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// SHA-256 of the canonical JSON of `args`.
    pub config_digest: String,
    pub seed: Option<u64>,
    /// Every resolved flag; feeding this file back as `--config` repeats
    /// the run.
    pub args: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix_ms: u128,
    pub wall_seconds: f64,
    pub timings: BTreeMap<String, f64>,
}

pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Recorder {
    pub fn start(command: &str, args: &impl Serialize, seed: Option<u64>) -> Self {
        let args = serde_json::to_value(args).expect("arguments serialize");
        let digest = hex::encode(Sha256::digest(args.to_string().as_bytes()));
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_digest: digest,
                seed,
                args,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix_ms: started,
                wall_seconds: 0.0,
                timings: BTreeMap::new(),
            },
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(FileDigest { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.outputs.push(FileDigest { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn timing(&mut self, name: &str, seconds: f64) {
        self.manifest.timings.insert(name.to_string(), seconds);
    }

    /// Writes `<anchor>.manifest.json` and returns its path.
    pub fn finish(mut self, anchor: &Path) -> Result<PathBuf> {
        self.manifest.wall_seconds = self.start.elapsed().as_secs_f64();
        let path = manifest_path(anchor);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn manifest_path(anchor: &Path) -> PathBuf {
    let mut s = anchor.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
