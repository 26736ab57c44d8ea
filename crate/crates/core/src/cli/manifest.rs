use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::model::SdmambaConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance of one command invocation. The run directory is named after
/// the hash of everything except the timestamp, so identical inputs land
/// in the same place.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Option<SdmambaConfig>,
    /// `(role, sha256)` of every input file.
    pub inputs: Vec<(String, String)>,
    /// Command options not captured by the config.
    pub params: Vec<(String, String)>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: format!("sdmamba-{}", env!("CARGO_PKG_VERSION")),
            seed,
            config: None,
            inputs: Vec::new(),
            params: Vec::new(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn input(&mut self, role: &str, bytes: &[u8]) -> &mut Self {
        self.inputs.push((role.into(), sha256_hex(bytes)));
        self
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.push((key.into(), value.to_string()));
        self
    }

    fn body(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "version={}", self.version);
        let _ = writeln!(s, "seed={}", self.seed);
        for (role, hash) in &self.inputs {
            let _ = writeln!(s, "input.{role}.sha256={hash}");
        }
        for (k, v) in &self.params {
            let _ = writeln!(s, "param.{k}={v}");
        }
        if let Some(cfg) = &self.config {
            for line in cfg.to_kv().lines() {
                let _ = writeln!(s, "config.{line}");
            }
        }
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.body().as_bytes())
    }

    pub fn to_text(&self) -> String {
        format!("{}created_unix={}\n", self.body(), self.created_unix)
    }

    pub fn run_dir(&self, base: &Path) -> PathBuf {
        base.join(&self.hash()[..12])
    }

    /// Creates the run directory and writes the manifest into it.
    pub fn create_run_dir(&self, base: &Path) -> Result<PathBuf> {
        let dir = self.run_dir(base);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(dir)
    }
}
