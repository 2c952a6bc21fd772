use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use marrowcast_core::{seed, Error, Result};
use serde::Serialize;
use serde_json::Value;

use crate::RunConfig;

pub const PROVENANCE_NAME: &str = "provenance.json";

/// What produced a set of artifacts. Holds no timestamps or absolute paths
/// so identical runs write identical files.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub config: Value,
    pub seeds: BTreeMap<String, Value>,
    /// SHA-256 of input files, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Blob SHA-256 of every checkpoint written, keyed by relative name.
    pub checkpoints: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("global".to_string(), config.seed.into());
        Self {
            tool: "marrowcast",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_sha256: config.hash(),
            config: config.echo(),
            seeds,
            inputs: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(role.to_string(), seed::sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(PROVENANCE_NAME);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}
