//! Line-delimited JSON stage files indexed by a run manifest.
//!
//! Layout of a run directory:
//!
//! ```text
//! <run>/manifest.json      {run_id, seed, config_digest, stages: [{name, path, count, sha256}]}
//! <run>/<stage>.jsonl      one JSON object per line
//! ```
//!
//! The manifest records each stage's line count and SHA-256 so that readers
//! detect files modified behind the store's back. A stage has a single writer
//! at a time; readers of a stage that is not being written are safe.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Validate;
use crate::util::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("record {index} rejected: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("corrupt stage file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("stage `{0}` is not in the manifest")]
    UnknownStage(String),
    #[error("invalid stage name `{0}`")]
    BadStageName(String),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
}

type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub path: String,
    pub count: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub stages: Vec<StageEntry>,
}

impl CorpusManifest {
    pub fn stage(&self, name: &str) -> Option<&StageEntry> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Handle on one run directory.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    manifest: CorpusManifest,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_stage_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadStageName(name.to_string()))
    }
}

fn count_lines(bytes: &[u8]) -> u64 {
    bytes.iter().filter(|&&b| b == b'\n').count() as u64
}

impl Store {
    /// Open an existing run, or initialise a fresh one.
    ///
    /// An existing manifest keeps its own `run_id`/`seed`/`config_digest`;
    /// the caller compares them if it cares.
    pub fn open_or_create(
        root: impl Into<PathBuf>,
        run_id: &str,
        seed: u64,
        config_digest: &str,
    ) -> Result<Self> {
        let root = root.into();
        if root.join(MANIFEST_FILE).exists() {
            return Self::open(root);
        }
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let store = Self {
            root,
            manifest: CorpusManifest {
                run_id: run_id.to_string(),
                seed,
                config_digest: config_digest.to_string(),
                stages: Vec::new(),
            },
        };
        store.save_manifest()?;
        Ok(store)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest =
            serde_json::from_slice(&bytes).map_err(|source| StoreError::Manifest { path, source })?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn has_stage(&self, name: &str) -> bool {
        self.manifest.stage(name).is_some()
    }

    pub fn stage_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.jsonl"))
    }

    /// Re-key the manifest to a new config digest (used after `--force` reruns).
    pub fn set_config_digest(&mut self, digest: &str) -> Result<()> {
        self.manifest.config_digest = digest.to_string();
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|source| {
            StoreError::Manifest {
                path: path.clone(),
                source,
            }
        })?;
        text.push('\n');
        write_synced(&tmp, text.as_bytes())?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn encode<T: Serialize + Validate>(path: &Path, records: &[T]) -> Result<Vec<u8>> {
        for (index, r) in records.iter().enumerate() {
            r.check()
                .map_err(|reason| StoreError::InvalidRecord { index, reason })?;
        }
        let mut buf = Vec::new();
        for (line, r) in records.iter().enumerate() {
            serde_json::to_writer(&mut buf, r).map_err(|source| StoreError::Json {
                path: path.to_path_buf(),
                line: line + 1,
                source,
            })?;
            buf.push(b'\n');
        }
        Ok(buf)
    }

    /// Read a stage file and check it against its manifest entry.
    fn verified_bytes(&self, entry: &StageEntry) -> Result<Vec<u8>> {
        let path = self.root.join(&entry.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(StoreError::Corrupt {
                path,
                reason: format!("sha256 {digest} does not match manifest {}", entry.sha256),
            });
        }
        let lines = count_lines(&bytes);
        if lines != entry.count {
            return Err(StoreError::Corrupt {
                path,
                reason: format!("{lines} records on disk, manifest says {}", entry.count),
            });
        }
        Ok(bytes)
    }

    fn upsert_entry(&mut self, name: &str, count: u64, sha256: String) {
        let path = format!("{name}.jsonl");
        match self.manifest.stages.iter_mut().find(|s| s.name == name) {
            Some(e) => {
                e.count = count;
                e.sha256 = sha256;
                e.path = path;
            }
            None => self.manifest.stages.push(StageEntry {
                name: name.to_string(),
                path,
                count,
                sha256,
            }),
        }
    }

    /// Append records to a stage, creating it if needed.
    ///
    /// The whole batch is validated first; if any record fails nothing is written.
    pub fn append_records<T: Serialize + Validate>(
        &mut self,
        stage: &str,
        records: &[T],
    ) -> Result<&CorpusManifest> {
        check_stage_name(stage)?;
        let path = self.stage_path(stage);
        let buf = Self::encode(&path, records)?;
        // Refuse to extend a file that no longer matches the manifest.
        let mut existing = match self.manifest.stage(stage).cloned() {
            Some(entry) => self.verified_bytes(&entry)?,
            None => Vec::new(),
        };
        {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            if existing.is_empty() {
                f.set_len(0).map_err(io_err(&path))?;
            }
            f.write_all(&buf).map_err(io_err(&path))?;
            f.sync_all().map_err(io_err(&path))?;
        }
        existing.extend_from_slice(&buf);
        let count = count_lines(&existing);
        self.upsert_entry(stage, count, sha256_hex(&existing));
        self.save_manifest()?;
        Ok(&self.manifest)
    }

    /// Replace a stage's contents atomically.
    pub fn write_stage<T: Serialize + Validate>(
        &mut self,
        stage: &str,
        records: &[T],
    ) -> Result<&CorpusManifest> {
        check_stage_name(stage)?;
        let path = self.stage_path(stage);
        let buf = Self::encode(&path, records)?;
        let tmp = self.root.join(format!("{stage}.jsonl.tmp"));
        write_synced(&tmp, &buf)?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.upsert_entry(stage, records.len() as u64, sha256_hex(&buf));
        self.save_manifest()?;
        Ok(&self.manifest)
    }

    pub fn remove_stage(&mut self, stage: &str) -> Result<()> {
        if let Some(pos) = self.manifest.stages.iter().position(|s| s.name == stage) {
            let entry = self.manifest.stages.remove(pos);
            let path = self.root.join(entry.path);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
            self.save_manifest()?;
        }
        Ok(())
    }

    /// Records of a stage in append order.
    ///
    /// The file is hashed and counted against the manifest before the first
    /// record is yielded.
    pub fn iterate_stage<T: DeserializeOwned>(&self, stage: &str) -> Result<StageIter<T>> {
        let entry = self
            .manifest
            .stage(stage)
            .ok_or_else(|| StoreError::UnknownStage(stage.to_string()))?;
        let bytes = self.verified_bytes(entry)?;
        Ok(StageIter {
            path: self.root.join(&entry.path),
            bytes,
            pos: 0,
            line: 0,
            _marker: PhantomData,
        })
    }

    pub fn read_stage<T: DeserializeOwned>(&self, stage: &str) -> Result<Vec<T>> {
        self.iterate_stage(stage)?.collect()
    }

    /// Raw verified bytes of a stage file.
    pub fn stage_bytes(&self, stage: &str) -> Result<Vec<u8>> {
        let entry = self
            .manifest
            .stage(stage)
            .ok_or_else(|| StoreError::UnknownStage(stage.to_string()))?;
        self.verified_bytes(entry)
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

/// Streaming decoder over a verified stage file.
pub struct StageIter<T> {
    path: PathBuf,
    bytes: Vec<u8>,
    pos: usize,
    line: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> Iterator for StageIter<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.bytes.len() {
            return None;
        }
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        let line = &rest[..end];
        self.pos += end + 1;
        self.line += 1;
        Some(serde_json::from_slice(line).map_err(|source| StoreError::Json {
            path: self.path.clone(),
            line: self.line,
            source,
        }))
    }
}
