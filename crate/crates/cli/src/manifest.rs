use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Inputs, outputs and timing of one subcommand run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
    #[serde(skip)]
    out_dir: PathBuf,
}

impl RunManifest {
    pub fn start(subcommand: &str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
            path: out_dir.to_path_buf(),
            source,
        })?;
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            config_hash: String::new(),
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            started: Some(Instant::now()),
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn config(&mut self, text: &str) {
        self.config_hash = sha256_hex(text.as_bytes());
    }

    /// Records the digest of an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Path of an output file inside the output directory.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let path = self.out_dir.join(name);
        self.outputs.push(path.display().to_string());
        path
    }

    pub fn write_output(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.output(name);
        fs::write(&path, contents).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn finish(mut self, name: &str) -> Result<()> {
        self.duration_secs = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        let path = self.out_dir.join(name);
        let text = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(&path, text).map_err(|source| CliError::Io { path, source })
    }
}
