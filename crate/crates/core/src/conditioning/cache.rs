use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingSequence, WeightVector};
use crate::{Error, Result};

const DATA: &str = "embeddings.f32";
const INDEX: &str = "index.jsonl";

/// Index line of the conditioned-embedding cache; `offset` counts f32 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub record_id: String,
    pub offset: usize,
    pub rows: usize,
    pub dim: usize,
    pub tokens: Vec<u32>,
    pub beta: f64,
    pub key_indices: Vec<usize>,
}

/// Flat little-endian f32 matrix file plus a line-delimited index.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        EmbeddingCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, entries: &[(String, EmbeddingSequence, WeightVector)]) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut data = Vec::new();
        let mut index = Vec::new();
        let mut offset = 0;
        for (id, seq, w) in entries {
            data.extend(seq.vectors.iter().flat_map(|v| v.to_le_bytes()));
            let entry = CacheEntry {
                record_id: id.clone(),
                offset,
                rows: seq.len(),
                dim: seq.d,
                tokens: seq.tokens.clone(),
                beta: w.beta,
                key_indices: w.key_indices.iter().copied().collect(),
            };
            offset += seq.vectors.len();
            writeln!(index, "{}", serde_json::to_string(&entry)?)?;
        }
        std::fs::write(self.dir.join(DATA), data)?;
        std::fs::write(self.dir.join(INDEX), index)?;
        Ok(())
    }

    pub fn load(&self) -> Result<BTreeMap<String, (CacheEntry, EmbeddingSequence)>> {
        let data = std::fs::read(self.dir.join(DATA))?;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let index = std::fs::read_to_string(self.dir.join(INDEX))?;
        let mut out = BTreeMap::new();
        for (i, line) in index
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let e: CacheEntry = serde_json::from_str(line).map_err(|err| Error::Manifest {
                line: i + 1,
                message: err.to_string(),
            })?;
            let end = e.offset + e.rows * e.dim;
            if end > values.len() {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: "entry points past end of data file".into(),
                });
            }
            let seq =
                EmbeddingSequence::new(e.tokens.clone(), values[e.offset..end].to_vec(), e.dim)?;
            out.insert(e.record_id.clone(), (e, seq));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let a = EmbeddingSequence::new(vec![1, 9, 2], vec![0.25, -1.5, 3.0, 4.0, 1e-7, -0.0], 2)
            .unwrap();
        let b = EmbeddingSequence::new(vec![1, 2], vec![1.0; 6], 3).unwrap();
        let w = super::super::build_weight_vector(3, &[(1, 1)], 1.21, &[0, 2]).unwrap();
        cache
            .write(&[
                ("a".into(), a.clone(), w),
                ("b".into(), b.clone(), WeightVector::ones(2)),
            ])
            .unwrap();
        let loaded = cache.load().unwrap();
        assert_eq!(loaded["a"].1, a);
        assert_eq!(loaded["b"].1, b);
        assert_eq!(loaded["a"].0.key_indices, vec![1]);
    }
}
