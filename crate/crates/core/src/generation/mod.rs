//! Guided sampling from captions, with optional subject weights, adapter
//! checkpoints and the rewrite baseline; batch runs keep a provenance file
//! so unchanged outputs are not regenerated.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    condition_embeddings, encode_caption, encode_unconditional, scale_exponent_to_beta,
    subject_conditioning, EmbeddingSequence, WeightVector,
};
use crate::diffusion::{ddim_sample, TinyDenoiser};
use crate::subjects::SubjectAnnotation;
use crate::trainer::{load_adapters, Checkpoint};
use crate::zoo::autoencoder::{tensor_to_image, LATENT_FACTOR};
use crate::zoo::{LatentAutoencoder, TextEncoder};
use crate::{Error, Result};

pub const PROVENANCE_FILE: &str = "generation.jsonl";
pub const IMAGE_EXT: &str = "png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    Base,
    Conditioned,
    RewriteBaseline,
}

impl fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenerationMode::Base => "base",
            GenerationMode::Conditioned => "conditioned",
            GenerationMode::RewriteBaseline => "rewrite-baseline",
        })
    }
}

impl FromStr for GenerationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(GenerationMode::Base),
            "conditioned" => Ok(GenerationMode::Conditioned),
            "rewrite-baseline" => Ok(GenerationMode::RewriteBaseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown generation mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub guidance_scale: f64,
    pub num_inference_steps: usize,
    pub seeds: Vec<u64>,
    pub resolution: u32,
    pub mode: GenerationMode,
    pub scale_exp: i64,
    pub checkpoint: Option<PathBuf>,
    pub renormalize: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            guidance_scale: 7.5,
            num_inference_steps: 100,
            seeds: vec![42, 3],
            resolution: 512,
            mode: GenerationMode::Conditioned,
            scale_exp: 2,
            checkpoint: None,
            renormalize: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("generate.seeds must be non-empty".to_string());
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(LATENT_FACTOR) {
            errs.push(format!(
                "generate.resolution must be a positive multiple of {LATENT_FACTOR}, got {}",
                self.resolution
            ));
        }
        if self.num_inference_steps == 0 {
            errs.push("generate.steps must be >= 1".into());
        }
        if !self.guidance_scale.is_finite() {
            errs.push("generate.guidance must be finite".into());
        }
        if !(0..=crate::conditioning::MAX_SCALE_EXP).contains(&self.scale_exp) {
            errs.push(format!(
                "generate.scale_exp must be in 0..=4, got {}",
                self.scale_exp
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Loaded models shared by every generation call.
pub struct GenerationBackend<'a> {
    pub encoder: &'a dyn TextEncoder,
    pub denoiser: &'a TinyDenoiser,
    pub autoencoder: &'a dyn LatentAutoencoder,
    /// Content hash of the installed adapter checkpoint, if any.
    pub checkpoint_hash: Option<String>,
}

impl GenerationBackend<'_> {
    pub fn sampler_id(&self) -> String {
        format!("ddim-eta0-cfg/{}", self.denoiser.schedule().id())
    }
}

/// Loads `path` onto `denoiser`; returns the checkpoint content hash.
pub fn install_checkpoint(denoiser: &mut TinyDenoiser, path: &Path) -> Result<String> {
    let checkpoint = Checkpoint::load(path)?;
    load_adapters(denoiser, &checkpoint)?;
    Ok(checkpoint.content_hash())
}

/// The prompt embedding the sampler sees for one caption under `config.mode`.
pub fn prompt_embedding(
    caption: &str,
    subjects: Option<&SubjectAnnotation>,
    rewrite: Option<&str>,
    config: &GenerationConfig,
    encoder: &dyn TextEncoder,
) -> Result<(EmbeddingSequence, WeightVector)> {
    match config.mode {
        GenerationMode::Base => {
            let base = encode_caption(caption, encoder)?;
            let w = WeightVector::ones(base.len());
            Ok((base, w))
        }
        GenerationMode::RewriteBaseline => {
            let prompt = rewrite.ok_or_else(|| {
                Error::InvalidArgument("rewrite-baseline mode needs a rewritten prompt".into())
            })?;
            let base = encode_caption(prompt, encoder)?;
            let w = WeightVector::ones(base.len());
            Ok((base, w))
        }
        GenerationMode::Conditioned => {
            let beta = scale_exponent_to_beta(config.scale_exp)?;
            let (base, w) = subject_conditioning(caption, subjects, encoder, beta)?;
            let conditioned = condition_embeddings(&base, &w, config.renormalize)?;
            Ok((conditioned, w))
        }
    }
}

/// One image per configured seed, in seed order.
pub fn generate(
    caption: &str,
    subjects: Option<&SubjectAnnotation>,
    rewrite: Option<&str>,
    config: &GenerationConfig,
    backend: &GenerationBackend<'_>,
) -> Result<Vec<RgbImage>> {
    config.validate()?;
    let (prompt, _) = prompt_embedding(caption, subjects, rewrite, config, backend.encoder)?;
    config
        .seeds
        .iter()
        .map(|&seed| sample_one(&prompt, seed, config, backend))
        .collect()
}

fn sample_one(
    prompt: &EmbeddingSequence,
    seed: u64,
    config: &GenerationConfig,
    backend: &GenerationBackend<'_>,
) -> Result<RgbImage> {
    let dtype: DType = backend.denoiser.dtype();
    let cond = prompt.to_tensor(dtype)?;
    let uncond = encode_unconditional(backend.encoder)?.to_tensor(dtype)?;
    let g = (config.resolution / LATENT_FACTOR) as usize;
    let latent = ddim_sample(
        backend.denoiser,
        &cond,
        &uncond,
        (g, g),
        config.num_inference_steps,
        config.guidance_scale,
        seed,
    )?;
    tensor_to_image(&backend.autoencoder.decode(&latent, (g, g))?)
}

/// Per-image provenance row of a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub record_id: String,
    pub seed: u64,
    pub mode: GenerationMode,
    pub scale_exp: i64,
    pub checkpoint_hash: Option<String>,
    pub guidance_scale: f64,
    pub num_inference_steps: usize,
    pub resolution: u32,
    pub sampler: String,
    pub backbone: String,
    pub prompt_sha256: String,
    pub image: String,
}

impl ProvenanceRow {
    fn same_inputs(&self, other: &ProvenanceRow) -> bool {
        let strip = |r: &ProvenanceRow| ProvenanceRow {
            image: String::new(),
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// A caption queued for batch generation.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub record_id: String,
    pub caption: String,
    pub subjects: Option<SubjectAnnotation>,
    pub rewrite: Option<String>,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub generated: usize,
    pub skipped: usize,
    /// `(record_id, error)` for records that failed; the batch carries on.
    pub failures: Vec<(String, Error)>,
    pub rows: Vec<ProvenanceRow>,
}

pub fn image_file_name(record_id: &str, seed: u64) -> String {
    format!("{record_id}_{seed}.{IMAGE_EXT}")
}

pub fn read_provenance(path: &Path) -> Result<Vec<ProvenanceRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_provenance(path: &Path, rows: &BTreeMap<(String, u64), ProvenanceRow>) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    for row in rows.values() {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    drop(f);
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Generates every `(item, seed)` image into `out_dir`, skipping those whose
/// recorded provenance already matches and whose file is present.
pub fn batch_generate(
    items: &[BatchItem],
    config: &GenerationConfig,
    backend: &GenerationBackend<'_>,
    out_dir: &Path,
) -> Result<BatchOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let prov_path = out_dir.join(PROVENANCE_FILE);
    let mut rows: BTreeMap<(String, u64), ProvenanceRow> = read_provenance(&prov_path)?
        .into_iter()
        .map(|r| ((r.record_id.clone(), r.seed), r))
        .collect();
    let mut outcome = BatchOutcome::default();
    for item in items {
        let prompt = match prompt_embedding(
            &item.caption,
            item.subjects.as_ref(),
            item.rewrite.as_deref(),
            config,
            backend.encoder,
        ) {
            Ok((p, _)) => p,
            Err(e) => {
                outcome.failures.push((item.record_id.clone(), e));
                continue;
            }
        };
        let prompt_sha256 = crate::text::sha256_hex(
            prompt
                .vectors
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<u8>>(),
        );
        for &seed in &config.seeds {
            let name = image_file_name(&item.record_id, seed);
            let row = ProvenanceRow {
                record_id: item.record_id.clone(),
                seed,
                mode: config.mode,
                scale_exp: config.scale_exp,
                checkpoint_hash: backend.checkpoint_hash.clone(),
                guidance_scale: config.guidance_scale,
                num_inference_steps: config.num_inference_steps,
                resolution: config.resolution,
                sampler: backend.sampler_id(),
                backbone: backend.denoiser.id().to_string(),
                prompt_sha256: prompt_sha256.clone(),
                image: name.clone(),
            };
            let key = (item.record_id.clone(), seed);
            let path = out_dir.join(&name);
            if rows.get(&key).is_some_and(|r| r.same_inputs(&row)) && path.exists() {
                outcome.skipped += 1;
                outcome.rows.push(row);
                continue;
            }
            let result = sample_one(&prompt, seed, config, backend).and_then(|img| {
                img.save(&path)?;
                Ok(())
            });
            match result {
                Ok(()) => {
                    outcome.generated += 1;
                    rows.insert(key, row.clone());
                    outcome.rows.push(row);
                }
                Err(e) => outcome.failures.push((item.record_id.clone(), e)),
            }
        }
    }
    write_provenance(&prov_path, &rows)?;
    Ok(outcome)
}
