//! Run directories: every file of a run is staged next to the target and the
//! directory only appears once the manifest has been written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fvsim::experiments::Check;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub rng: String,
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub checks: Vec<Check>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Files of one run, held in memory until `commit`.
pub struct Run {
    command: String,
    config: serde_json::Value,
    seed: u64,
    files: Vec<(String, Vec<u8>)>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
}

impl Run {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            files: Vec::new(),
            metrics: BTreeMap::new(),
            checks: Vec::new(),
        })
    }

    pub fn add_file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn manifest(&self) -> Result<Manifest> {
        let canonical = serde_json::to_vec(&self.config)?;
        Ok(Manifest {
            tool: "fvsim".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            config: self.config.clone(),
            config_hash: sha256_hex(&canonical),
            seed: self.seed,
            rng: "chacha8 keyed by (seed, domain, step, slot, counter)".into(),
            files: self
                .files
                .iter()
                .map(|(name, b)| FileEntry { name: name.clone(), bytes: b.len(), sha256: sha256_hex(b) })
                .collect(),
            metrics: self.metrics.clone(),
            checks: self.checks.clone(),
        })
    }

    /// Writes everything into `out`. Refuses to replace a non-empty directory
    /// unless `force` is set.
    pub fn commit(self, out: &Path, force: bool) -> Result<Manifest> {
        if out.exists() {
            let empty = out.is_dir() && fs::read_dir(out)?.next().is_none();
            if !empty && !force {
                bail!("output directory {} is not empty (use --force to replace it)", out.display());
            }
        }
        let manifest = self.manifest()?;
        let staging = staging_path(out);
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        for (name, bytes) in &self.files {
            fs::write(staging.join(name), bytes)?;
        }
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(staging.join(MANIFEST), json)?;
        if out.exists() {
            fs::remove_dir_all(out)?;
        }
        fs::rename(&staging, out).with_context(|| format!("moving results into {}", out.display()))?;
        Ok(manifest)
    }
}

fn staging_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!(".{name}.partial"))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}
