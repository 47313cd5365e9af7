use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileEntry>,
    pub artifacts: Vec<FileEntry>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    /// Free-form choices recorded for provenance.
    pub notes: BTreeMap<String, String>,
}

/// Every command executed against one run directory, oldest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ManifestLog {
    pub runs: Vec<RunManifest>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Write-`.tmp`-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A run directory with bookkeeping of what the current command read and wrote.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    written: Vec<String>,
    read: Vec<String>,
    notes: BTreeMap<String, String>,
    started: Instant,
    started_unix: u64,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            read: Vec::new(),
            notes: BTreeMap::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Ensures the parent directory of `rel` exists and returns the full path.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.prepare(rel)?;
        write_atomic(&p, bytes)?;
        self.track(rel);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Records a file written by other code.
    pub fn track(&mut self, rel: &str) {
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    pub fn note_input(&mut self, rel: &str) {
        if !self.read.iter().any(|w| w == rel) && !self.written.iter().any(|w| w == rel) {
            self.read.push(rel.to_string());
        }
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) {
        self.notes.insert(key.to_string(), value.into());
    }

    fn entries(&self, rels: &[String]) -> Result<Vec<FileEntry>> {
        rels.iter()
            .map(|r| {
                let (sha256, bytes) = sha256_file(&self.path(r))?;
                Ok(FileEntry {
                    path: r.clone(),
                    sha256,
                    bytes,
                })
            })
            .collect()
    }

    /// Appends this command's record to `manifest.json`; always the last write.
    pub fn finish(self, command: &str, config: &RunConfig) -> Result<RunManifest> {
        let mut seeds = BTreeMap::new();
        seeds.insert("master".to_string(), config.seed);
        seeds.insert("corpus".to_string(), config.corpus.seed);
        seeds.insert("model_init".to_string(), config.model.seed);
        seeds.insert("pretrain".to_string(), config.pretrain.seed);
        seeds.insert("mask".to_string(), config.mask.seed);
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds,
            inputs: self.entries(&self.read)?,
            artifacts: self.entries(&self.written)?,
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            notes: self.notes.clone(),
        };
        let path = self.path(MANIFEST_FILE);
        let mut log: ManifestLog = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ManifestLog::default(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        log.runs.push(manifest.clone());
        write_atomic(&path, &serde_json::to_vec_pretty(&log)?)?;
        Ok(manifest)
    }
}
