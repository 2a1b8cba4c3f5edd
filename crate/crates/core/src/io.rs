//! File helpers, content hashing and stage manifests.
//!
//! A pipeline stage records every file it wrote, with a SHA-256 hash, in a
//! `stage.json` next to its outputs, together with a fingerprint of the
//! inputs that produced them. A stage is skipped on re-invocation only when
//! the fingerprint matches and every listed file still hashes correctly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STAGE_FILE: &str = "stage.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `value`.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

/// Writes via a temporary sibling and a rename, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json_pretty(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the run directory, with `/` separators.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub fingerprint: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub info: serde_json::Value,
}

impl StageManifest {
    /// True when every artifact exists under `root` with the recorded hash.
    pub fn verify(&self, root: &Path) -> bool {
        self.artifacts.iter().all(|a| match fs::read(root.join(&a.path)) {
            Ok(bytes) => sha256_hex(&bytes) == a.sha256,
            Err(_) => false,
        })
    }
}

fn rel_string(rel: &Path) -> String {
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Collects the files of one stage as they are written.
#[derive(Debug)]
pub struct StageWriter {
    root: PathBuf,
    dir: PathBuf,
    stage: String,
    fingerprint: String,
    artifacts: Vec<ArtifactEntry>,
}

impl StageWriter {
    /// `dir` is relative to `root` and holds the stage's `stage.json`.
    pub fn new(root: &Path, dir: impl AsRef<Path>, stage: impl Into<String>, fingerprint: impl Into<String>) -> Self {
        StageWriter {
            root: root.to_path_buf(),
            dir: dir.as_ref().to_path_buf(),
            stage: stage.into(),
            fingerprint: fingerprint.into(),
            artifacts: Vec::new(),
        }
    }

    /// Writes `bytes` to `dir/name` and records it.
    pub fn write(&mut self, name: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let rel = self.dir.join(name);
        let path = self.root.join(&rel);
        write_file(&path, bytes)?;
        self.record(&rel, bytes);
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        self.write(name, to_json_pretty(value)?.as_bytes())
    }

    /// Records a file some other routine already wrote under `dir`.
    pub fn adopt(&mut self, name: impl AsRef<Path>) -> Result<()> {
        let rel = self.dir.join(name);
        let bytes = read_bytes(&self.root.join(&rel))?;
        self.record(&rel, &bytes);
        Ok(())
    }

    fn record(&mut self, rel: &Path, bytes: &[u8]) {
        let path = rel_string(rel);
        self.artifacts.retain(|a| a.path != path);
        self.artifacts.push(ArtifactEntry { path, sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.dir)
    }

    pub fn finish(mut self, info: serde_json::Value) -> Result<StageManifest> {
        self.artifacts.sort();
        let manifest = StageManifest { stage: self.stage, fingerprint: self.fingerprint, artifacts: self.artifacts, info };
        write_json(&self.root.join(&self.dir).join(STAGE_FILE), &manifest)?;
        Ok(manifest)
    }
}

/// The stage manifest in `root/dir` if its fingerprint matches and its files
/// are intact.
pub fn completed_stage(root: &Path, dir: impl AsRef<Path>, fingerprint: &str) -> Option<StageManifest> {
    let m: StageManifest = read_json(&root.join(dir).join(STAGE_FILE)).ok()?;
    (m.fingerprint == fingerprint && m.verify(root)).then_some(m)
}

/// Every stage manifest below `root`, sorted by path.
pub fn collect_stage_manifests(root: &Path) -> Result<Vec<(String, StageManifest)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == STAGE_FILE) {
                let rel = rel_string(path.strip_prefix(root).unwrap_or(&path));
                out.push((rel, read_json(&path)?));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: Vec<StageSummary>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub manifest: String,
    pub fingerprint: String,
}

/// Rebuilds `root/manifest.json` from all stage manifests.
pub fn write_run_manifest(root: &Path) -> Result<RunManifest> {
    let stages = collect_stage_manifests(root)?;
    let mut artifacts: Vec<ArtifactEntry> = Vec::new();
    let mut summaries = Vec::new();
    for (path, m) in &stages {
        summaries.push(StageSummary { stage: m.stage.clone(), manifest: path.clone(), fingerprint: m.fingerprint.clone() });
        artifacts.extend(m.artifacts.iter().cloned());
        let bytes = read_bytes(&root.join(path))?;
        artifacts.push(ArtifactEntry { path: path.clone(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    artifacts.sort();
    artifacts.dedup();
    let manifest = RunManifest { stages: summaries, artifacts };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
