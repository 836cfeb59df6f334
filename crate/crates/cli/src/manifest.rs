//! Output bookkeeping: every emitted file is tracked, digested into
//! manifest.json on success and removed on failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_err, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Design switches in effect, by name.
    pub switches: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

pub fn digest(path: &Path, root: &Path) -> CliResult<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(FileDigest {
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Files written by one command.
pub struct Outputs {
    pub dir: PathBuf,
    written: Vec<PathBuf>,
    pub notes: Vec<String>,
    pub switches: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> CliResult<Outputs> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: vec![],
            notes: vec![],
            switches: BTreeMap::new(),
            inputs: vec![],
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an output file, tracked from now on.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.record(p.clone());
        p
    }

    pub fn record(&mut self, path: PathBuf) {
        if !self.written.contains(&path) {
            self.written.push(path);
        }
    }

    pub fn record_input(&mut self, path: PathBuf) {
        self.inputs.push(path);
    }

    pub fn switch(&mut self, key: &str, value: impl ToString) {
        self.switches.insert(key.to_string(), value.to_string());
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).expect("serialisable value");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        self.record(path.clone());
        Ok(path)
    }

    /// Deletes everything written so far.
    pub fn discard(&mut self) {
        for p in self.written.drain(..) {
            let _ = std::fs::remove_file(p);
        }
    }

    pub fn finish(mut self, command: &str, cfg: &RunConfig) -> CliResult<PathBuf> {
        let mut outputs =
            self.written.iter().filter(|p| p.exists()).map(|p| digest(p, &self.dir)).collect::<CliResult<Vec<_>>>()?;
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let inputs = self.inputs.iter().map(|p| digest(p, Path::new(""))).collect::<CliResult<Vec<_>>>()?;
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs,
            outputs,
            switches: std::mem::take(&mut self.switches),
            notes: std::mem::take(&mut self.notes),
        };
        let path = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("serialisable manifest");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
