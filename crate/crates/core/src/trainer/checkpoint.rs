//! Adapter checkpoints: one safetensors archive holding adapter factors,
//! optimizer moments and a JSON metadata blob. Base weights are never stored.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::{Error, Result};

pub const FORMAT: &str = "safe-dfe-checkpoint-v1";
const META_KEY: &str = "safe";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub backbone_id: String,
    pub base_fingerprint: String,
    pub config: TrainConfig,
    pub epoch: u64,
    pub global_step: u64,
    pub adam_step: u64,
    pub skipped_nonfinite: u64,
    pub reward_history: Vec<(u64, f64)>,
    pub sites: Vec<String>,
    pub payload_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    };
    Ok(Raw {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

fn payload_hash(raws: &[(String, Raw)]) -> String {
    let mut sorted: Vec<&(String, Raw)> = raws.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, raw) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(format!("{:?}", raw.dtype).as_bytes());
        for d in &raw.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update((raw.bytes.len() as u64).to_le_bytes());
        h.update(&raw.bytes);
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    /// Content identity: the payload digest plus the base it belongs to.
    pub fn content_hash(&self) -> String {
        crate::text::sha256_hex(format!(
            "{}|{}|{}",
            self.meta.payload_sha256, self.meta.base_fingerprint, self.meta.global_step
        ))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes atomically (temporary file, then rename). Fills in the payload digest.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let raws: Vec<(String, Raw)> = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), to_raw(t)?)))
            .collect::<Result<_>>()?;
        self.meta.payload_sha256 = payload_hash(&raws);
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        let bytes = safetensors::serialize(raws.iter().map(|(n, r)| (n.as_str(), r)), Some(info))
            .map_err(|e| Error::InvalidArgument(format!("serialize checkpoint: {e}")))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads and verifies the archive; any structural or digest problem is
    /// an integrity error.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let bad = |m: String| Error::CheckpointIntegrity(format!("{}: {m}", path.display()));
        let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let blob = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("metadata missing".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(blob).map_err(|e| bad(e.to_string()))?;
        if meta.format != FORMAT {
            return Err(bad(format!("unknown format {}", meta.format)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut raws = Vec::new();
        let mut tensors = Vec::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?
                }
                Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?
                }
                other => return Err(bad(format!("unsupported dtype {other:?}"))),
            };
            raws.push((
                name.clone(),
                Raw {
                    dtype: view.dtype(),
                    shape,
                    bytes: data.to_vec(),
                },
            ));
            tensors.push((name, t));
        }
        if payload_hash(&raws) != meta.payload_sha256 {
            return Err(bad("payload digest mismatch".into()));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint { meta, tensors })
    }
}
