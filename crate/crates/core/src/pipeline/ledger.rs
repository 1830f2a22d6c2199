use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::write_atomic;
use super::Stage;
use crate::{Error, Result};

/// Completion record of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: Stage,
    pub input_hash: String,
    pub output_hash: String,
    /// Hash of the manifest columns the stage owns.
    pub columns_hash: String,
    pub artifacts_hash: String,
    pub manifest_sha256: String,
    pub summary: serde_json::Value,
}

/// Line-delimited stage ledger, one entry per completed stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Ledger::default());
        }
        let mut entries = Vec::new();
        for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Ledger { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn get(&self, stage: Stage) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.stage == stage)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn put(&mut self, entry: LedgerEntry) {
        self.entries.retain(|e| e.stage != entry.stage);
        self.entries.push(entry);
        self.entries.sort_by_key(|e| e.stage);
    }

    /// Drops every stage after `stage`.
    pub fn invalidate_after(&mut self, stage: Stage) -> Vec<Stage> {
        let dropped: Vec<Stage> = self
            .entries
            .iter()
            .map(|e| e.stage)
            .filter(|s| *s > stage)
            .collect();
        self.entries.retain(|e| e.stage <= stage);
        dropped
    }
}

/// Incremental hash over labelled parts.
#[derive(Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn part(&mut self, label: &str, bytes: impl AsRef<[u8]>) -> &mut Self {
        let bytes = bytes.as_ref();
        self.0.update((label.len() as u64).to_le_bytes());
        self.0.update(label.as_bytes());
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Content hash of a file or (recursively, in path order) a directory;
/// missing paths hash to a fixed marker.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Hasher::default();
    hash_into(&mut h, path, Path::new(""))?;
    Ok(h.finish())
}

fn hash_into(h: &mut Hasher, path: &Path, rel: &Path) -> Result<()> {
    if path.is_dir() {
        let mut children: Vec<_> = std::fs::read_dir(path)?.collect::<std::io::Result<Vec<_>>>()?;
        children.sort_by_key(|e| e.file_name());
        h.part("dir", rel.to_string_lossy().as_bytes());
        for c in children {
            hash_into(h, &c.path(), &rel.join(c.file_name()))?;
        }
    } else if path.is_file() {
        h.part("file", rel.to_string_lossy().as_bytes());
        h.part("bytes", std::fs::read(path)?);
    } else {
        h.part("missing", rel.to_string_lossy().as_bytes());
    }
    Ok(())
}
