//! Output directories and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha1::{Digest, Sha1};

use crate::Invalid;

/// Hash of `bytes` as git stores a blob: SHA-1 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fails unless `path` is free or `force` is set.
pub fn claim(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(Invalid(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        ))
        .into());
    }
    Ok(())
}

/// A directory that receives a run's files and finally its manifest.
pub struct RunDir {
    pub path: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(path: &Path, force: bool) -> anyhow::Result<Self> {
        claim(path, force)?;
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name);
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Notes a file written by someone else, relative to the directory.
    pub fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn record_paths(&mut self, paths: &[PathBuf]) {
        for p in paths {
            let rel = p.strip_prefix(&self.path).unwrap_or(p);
            self.record(&rel.to_string_lossy());
        }
    }

    pub fn finish(mut self, manifest: Manifest) -> anyhow::Result<PathBuf> {
        let mut outputs = std::mem::take(&mut self.written);
        outputs.sort();
        outputs.dedup();
        let manifest = Manifest { outputs, ..manifest };
        self.write_json("manifest.json", &manifest)
    }
}

/// What produced a set of outputs. Holds nothing that varies between two
/// identical invocations.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config: Value,
    /// Input file name to its blob hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> anyhow::Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(mut self, role: &str, path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(role.to_string(), blob_hash(&bytes));
        Ok(self)
    }
}
