//! Per-token weighting of text-encoder states: key subject tokens are
//! multiplied by `beta`, every other row is passed through untouched.

mod cache;

pub use cache::{CacheEntry, EmbeddingCache};

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::zoo::TextEncoder;
use crate::{Error, Result};

pub const DEFAULT_SCALE_EXP: i64 = 2;
pub const MAX_SCALE_EXP: i64 = 4;
pub const SCALE_BASE: f64 = 1.1;

/// Inclusive token-index span `[start, end]`.
pub type TokenSpan = (usize, usize);

/// Encoder output: one `d`-wide row per token id, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence {
    pub tokens: Vec<u32>,
    pub vectors: Vec<f32>,
    pub d: usize,
}

impl EmbeddingSequence {
    pub fn new(tokens: Vec<u32>, vectors: Vec<f32>, d: usize) -> Result<Self> {
        let seq = EmbeddingSequence { tokens, vectors, d };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.len() != self.tokens.len() * self.d {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} tokens of width {}",
                self.vectors.len(),
                self.tokens.len(),
                self.d
            )));
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.vectors.clone(), (self.len(), self.d), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub beta: f64,
    pub key_indices: BTreeSet<usize>,
}

impl WeightVector {
    pub fn ones(m: usize) -> Self {
        WeightVector {
            weights: vec![1.0; m],
            beta: 1.0,
            key_indices: BTreeSet::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.weights.iter().all(|w| *w == 1.0)
    }
}

/// `weights[i] = beta` for every index covered by a span that is not a
/// special position, `1` elsewhere. Overlapping or repeated spans count once.
pub fn build_weight_vector(
    m: usize,
    key_spans: &[TokenSpan],
    beta: f64,
    special: &[usize],
) -> Result<WeightVector> {
    if !beta.is_finite() || beta < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "beta must be a finite value >= 1, got {beta}"
        )));
    }
    let mut key_indices = BTreeSet::new();
    for &(start, end) in key_spans {
        if start > end || end >= m {
            return Err(Error::SpanOutOfBounds { start, end, len: m });
        }
        key_indices.extend((start..=end).filter(|i| !special.contains(i)));
    }
    let weights = (0..m)
        .map(|i| if key_indices.contains(&i) { beta } else { 1.0 })
        .collect();
    Ok(WeightVector {
        weights,
        beta,
        key_indices,
    })
}

/// Positions of begin/end/padding ids in `tokens`.
pub fn special_positions(tokens: &[u32], encoder: &dyn TextEncoder) -> Vec<usize> {
    let tok = encoder.tokenizer();
    tokens
        .iter()
        .enumerate()
        .filter(|(_, id)| tok.is_special(**id))
        .map(|(i, _)| i)
        .collect()
}

/// `1.1^k` by repeated multiplication, for `k` in `0..=4`.
pub fn scale_exponent_to_beta(k: i64) -> Result<f64> {
    if !(0..=MAX_SCALE_EXP).contains(&k) {
        return Err(Error::UnsupportedScaleExponent(k));
    }
    Ok((0..k).fold(1.0, |acc, _| acc * SCALE_BASE))
}

/// Row `i` of the output is row `i` of `base` times `weights[i]`. With
/// `renormalize`, the result is rescaled so the mean over all entries matches
/// the input's (off by default).
pub fn condition_embeddings(
    base: &EmbeddingSequence,
    w: &WeightVector,
    renormalize: bool,
) -> Result<EmbeddingSequence> {
    if w.weights.len() != base.len() {
        return Err(Error::WeightLengthMismatch {
            weights: w.weights.len(),
            tokens: base.len(),
        });
    }
    let mut vectors = Vec::with_capacity(base.vectors.len());
    for (i, &wi) in w.weights.iter().enumerate() {
        let wi = wi as f32;
        vectors.extend(base.row(i).iter().map(|v| v * wi));
    }
    if renormalize {
        let before: f64 = base.vectors.iter().map(|v| *v as f64).sum();
        let after: f64 = vectors.iter().map(|v| *v as f64).sum();
        if after != 0.0 && before != 0.0 {
            let r = (before / after) as f32;
            vectors.iter_mut().for_each(|v| *v *= r);
        }
    }
    Ok(EmbeddingSequence {
        tokens: base.tokens.clone(),
        vectors,
        d: base.d,
    })
}

/// Token ids of `caption` wrapped in begin/end markers, after the context check.
pub fn caption_token_ids(caption: &str, encoder: &dyn TextEncoder) -> Result<Vec<u32>> {
    if caption.trim().is_empty() {
        return Err(Error::EmptyCaption);
    }
    let tok = encoder.tokenizer();
    let mut ids = vec![tok.bos_id()];
    ids.extend(tok.tokenize(caption).iter().map(|t| t.id));
    ids.push(tok.eos_id());
    if ids.len() > tok.context_length() {
        return Err(Error::ContextOverflow {
            tokens: ids.len(),
            limit: tok.context_length(),
        });
    }
    Ok(ids)
}

pub fn encode_caption(caption: &str, encoder: &dyn TextEncoder) -> Result<EmbeddingSequence> {
    let ids = caption_token_ids(caption, encoder)?;
    let vectors = encoder.encode_ids(&ids)?;
    EmbeddingSequence::new(ids, vectors, encoder.width())
}

/// The empty-prompt encoding used as the unconditional branch of guidance.
pub fn encode_unconditional(encoder: &dyn TextEncoder) -> Result<EmbeddingSequence> {
    let tok = encoder.tokenizer();
    let ids = vec![tok.bos_id(), tok.eos_id()];
    let vectors = encoder.encode_ids(&ids)?;
    EmbeddingSequence::new(ids, vectors, encoder.width())
}

/// Encodes `caption` and builds its weight vector from subject phrases
/// (fallback annotations and `beta = 1` give all-ones weights).
pub fn subject_conditioning(
    caption: &str,
    annotation: Option<&crate::subjects::SubjectAnnotation>,
    encoder: &dyn TextEncoder,
    beta: f64,
) -> Result<(EmbeddingSequence, WeightVector)> {
    let base = encode_caption(caption, encoder)?;
    let phrases = match annotation {
        Some(a) if !a.fallback_used => a.phrases(),
        _ => Vec::new(),
    };
    let alignment =
        crate::subjects::align_phrases_to_tokens(caption, &phrases, encoder.tokenizer());
    let special = special_positions(&base.tokens, encoder);
    let weights = build_weight_vector(base.len(), &alignment.token_spans(), beta, &special)?;
    Ok((base, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_example_weights() {
        let w = build_weight_vector(
            6,
            &[(1, 2), (4, 4)],
            scale_exponent_to_beta(2).unwrap(),
            &[],
        )
        .unwrap();
        let expected = [1.0, 1.21, 1.21, 1.0, 1.21, 1.0];
        assert!(
            w.weights
                .iter()
                .zip(expected)
                .all(|(a, b)| (a - b).abs() < 1e-12),
            "{:?}",
            w.weights
        );
        assert!(build_weight_vector(6, &[], 1.21, &[])
            .unwrap()
            .is_identity());
        assert_eq!(
            build_weight_vector(6, &[(0, 6)], 1.21, &[])
                .unwrap_err()
                .code(),
            "span_out_of_bounds"
        );
        let guarded = build_weight_vector(4, &[(0, 3)], 1.21, &[0, 3]).unwrap();
        assert_eq!(guarded.key_indices, BTreeSet::from([1, 2]));
    }

    #[test]
    fn beta_table() {
        assert_eq!(scale_exponent_to_beta(0).unwrap(), 1.0);
        assert_eq!(scale_exponent_to_beta(1).unwrap(), 1.1);
        assert!((scale_exponent_to_beta(2).unwrap() - 1.21).abs() < 1e-15);
        assert!((scale_exponent_to_beta(4).unwrap() - 1.4641).abs() < 1e-12);
        assert_eq!(
            scale_exponent_to_beta(-1).unwrap_err().code(),
            "unsupported_scale_exponent"
        );
    }

    #[test]
    fn length_mismatch() {
        let base = EmbeddingSequence::new(vec![1, 2], vec![0.5; 4], 2).unwrap();
        let err = condition_embeddings(&base, &WeightVector::ones(3), false).unwrap_err();
        assert_eq!(err.code(), "weight_length_mismatch");
    }

    #[test]
    fn renormalize_preserves_mean() {
        let base =
            EmbeddingSequence::new(vec![1, 5, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        let w = build_weight_vector(3, &[(1, 1)], 1.21, &[]).unwrap();
        let out = condition_embeddings(&base, &w, true).unwrap();
        let s: f32 = out.vectors.iter().sum();
        assert!((s - 21.0).abs() < 1e-4);
    }
}
