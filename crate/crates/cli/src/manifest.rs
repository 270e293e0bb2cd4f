use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rasa_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    /// Canonical TOML of the configuration the command runs with.
    pub effective: String,
    /// The configuration file text followed by the overrides, as given.
    pub source: String,
}

/// Record of one command invocation, written once before any compute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: ConfigEcho,
    /// Content hash of the input corpus; `None` for `gen-data`, whose corpus does not exist yet.
    pub corpus_fingerprint: Option<String>,
    pub version: String,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Seconds since the Unix epoch when the command started.
    pub started_at: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: ConfigEcho, corpus_fingerprint: Option<String>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            corpus_fingerprint,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: BTreeMap::new(),
            started_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        }
    }

    pub fn output(mut self, role: &str, path: &Path) -> Self {
        self.outputs.insert(role.to_string(), path.to_path_buf());
        self
    }

    /// Writes `<command>_manifest.json` into `dir`, or `<command>_manifest.<n>.json`
    /// when earlier invocations already left one. Never overwrites.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}_manifest", self.command.replace('-', "_"));
        let bytes = serde_json::to_vec_pretty(self)?;
        for n in 0u32.. {
            let name = if n == 0 { format!("{stem}.json") } else { format!("{stem}.{n}.json") };
            let path = dir.join(name);
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(&bytes)?;
                    return Ok(path);
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::Data(format!("no free manifest name in {}", dir.display())))
    }
}
