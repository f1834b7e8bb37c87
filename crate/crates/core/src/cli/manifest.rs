use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation: what went in, what came out.
///
/// Only `timestamps` and `wall_time_secs` vary between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    /// Relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub timestamps: Timestamps,
    pub wall_time_secs: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Collects output paths while a command runs and writes the manifest last.
pub struct ManifestBuilder {
    root: PathBuf,
    command: String,
    config: serde_json::Value,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    started: String,
    wall: BTreeMap<String, f64>,
}

impl ManifestBuilder {
    pub fn new(root: &Path, command: &str, config: serde_json::Value) -> Self {
        ManifestBuilder {
            root: root.to_path_buf(),
            command: command.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            wall: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputFile {
            path: display_name(path),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
    }

    pub fn wall_time(&mut self, key: String, secs: f64) {
        self.wall.insert(key, secs);
    }

    pub fn finish(mut self, file_name: &str) -> Result<PathBuf> {
        self.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.sort();
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            timestamps: Timestamps {
                started: self.started,
                finished: now(),
            },
            wall_time_secs: self.wall,
        };
        let path = self.root.join(file_name);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// File name only, so manifests do not depend on where inputs live.
fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}
