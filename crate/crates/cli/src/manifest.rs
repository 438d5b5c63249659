use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Provenance record written next to every command's outputs.
pub struct Manifest {
    command: &'static str,
    argv: Vec<String>,
    config: String,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str, argv: &[String]) -> Self {
        Manifest {
            command,
            argv: argv.to_vec(),
            config: String::new(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(mut self, resolved: String) -> Self {
        self.config = resolved;
        self
    }

    pub fn seeds(mut self, seeds: &[u64]) -> Self {
        self.seeds = seeds.to_vec();
        self
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    /// Writes `manifest.json` into `dir`; output files are digested as
    /// written on disk.
    pub fn write(self, dir: &Path) -> Result<(), CliError> {
        let mut inputs = Map::new();
        for p in &self.inputs {
            if p.is_dir() {
                let mut entries: Vec<PathBuf> = fs::read_dir(p)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                entries.sort();
                for f in entries {
                    inputs.insert(f.display().to_string(), Value::String(file_digest(&f)?));
                }
            } else {
                inputs.insert(p.display().to_string(), Value::String(file_digest(p)?));
            }
        }
        let mut outputs = Map::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), Value::String(file_digest(&dir.join(rel))?));
        }
        let doc = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "argv": self.argv,
            "config": self.config,
            "config_sha256": sha256_hex(self.config.as_bytes()),
            "seeds": self.seeds,
            "inputs": inputs,
            "outputs": outputs,
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text + "\n").map_err(|e| CliError::Data(format!("manifest: {e}")))
    }
}
