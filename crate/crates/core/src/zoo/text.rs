//! Word-level tokenizer and a one-layer transformer text encoder.

use crate::text::fnv1a;
use crate::Result;

use super::dense::{gaussian, layer_norm_rows, matmul_t, mix_seed};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

/// One token with its half-open character span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer: Send + Sync {
    /// Content tokens only (no specials).
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn bos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    /// Maximum sequence length including specials.
    fn context_length(&self) -> usize;
    fn is_special(&self, id: u32) -> bool {
        id == self.bos_id() || id == self.eos_id() || id == self.pad_id()
    }
}

/// Splits into runs of alphanumerics and single punctuation marks; ids are
/// hashed lowercase forms.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    pub vocab_size: u32,
    pub context_length: usize,
}

impl Default for WordTokenizer {
    fn default() -> Self {
        WordTokenizer {
            vocab_size: 2048,
            context_length: 77,
        }
    }
}

impl WordTokenizer {
    fn token_id(&self, text: &str) -> u32 {
        3 + (fnv1a(text.to_lowercase().as_bytes()) % (self.vocab_size as u64 - 3)) as u32
    }
}

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() || c.is_control() {
                i += 1;
                continue;
            }
            let start = i;
            if c.is_alphanumeric() {
                while i < chars.len() && chars[i].is_alphanumeric() {
                    i += 1;
                }
            } else {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            out.push(Token {
                id: self.token_id(&s),
                text: s,
                start,
                end: i,
            });
        }
        out
    }

    fn bos_id(&self) -> u32 {
        BOS_ID
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }

    fn pad_id(&self) -> u32 {
        PAD_ID
    }

    fn context_length(&self) -> usize {
        self.context_length
    }
}

/// Maps token ids (specials included) to final hidden states, one row per id.
pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn tokenizer(&self) -> &dyn Tokenizer;
    fn width(&self) -> usize;
    /// Row-major `ids.len() x width` hidden states.
    fn encode_ids(&self, ids: &[u32]) -> Result<Vec<f32>>;
}

/// Embedding + causal self-attention + MLP + final layer norm, with weights
/// drawn from a seeded generator.
#[derive(Debug, Clone)]
pub struct TinyTextEncoder {
    id: String,
    tokenizer: WordTokenizer,
    dim: usize,
    token_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

impl TinyTextEncoder {
    pub fn new(id: &str, seed: u64, dim: usize) -> Self {
        let tokenizer = WordTokenizer::default();
        let v = tokenizer.vocab_size as usize;
        let ctx = tokenizer.context_length;
        let s = |k: u64| mix_seed(seed, k);
        let proj = 1.0 / (dim as f64).sqrt();
        TinyTextEncoder {
            id: id.to_string(),
            dim,
            token_emb: gaussian(s(1), v * dim, 1.0),
            pos_emb: gaussian(s(2), ctx * dim, 0.3),
            wq: gaussian(s(3), dim * dim, proj),
            wk: gaussian(s(4), dim * dim, proj),
            wv: gaussian(s(5), dim * dim, proj),
            wo: gaussian(s(6), dim * dim, proj),
            w1: gaussian(s(7), 2 * dim * dim, proj),
            w2: gaussian(s(8), 2 * dim * dim, proj / 2f64.sqrt()),
            tokenizer,
        }
    }
}

impl TextEncoder for TinyTextEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn width(&self) -> usize {
        self.dim
    }

    fn encode_ids(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let (m, d) = (ids.len(), self.dim);
        if m > self.tokenizer.context_length {
            return Err(crate::Error::ContextOverflow {
                tokens: m,
                limit: self.tokenizer.context_length,
            });
        }
        let vocab = self.tokenizer.vocab_size as usize;
        let mut x = vec![0f32; m * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = (id as usize).min(vocab - 1);
            for j in 0..d {
                x[i * d + j] = self.token_emb[id * d + j] + self.pos_emb[i * d + j];
            }
        }
        let h = layer_norm_rows(&x, d);
        let q = matmul_t(&h, m, d, &self.wq, d);
        let k = matmul_t(&h, m, d, &self.wk, d);
        let v = matmul_t(&h, m, d, &self.wv, d);
        let scale = 1.0 / (d as f32).sqrt();
        let mut att = vec![0f32; m * d];
        for i in 0..m {
            let scores: Vec<f32> = (0..=i)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f32>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f32 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for c in 0..d {
                    att[i * d + c] += e / z * v[j * d + c];
                }
            }
        }
        let o = matmul_t(&att, m, d, &self.wo, d);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        let h = layer_norm_rows(&x, d);
        let mut a = matmul_t(&h, m, d, &self.w1, 2 * d);
        for v in a.iter_mut() {
            *v = v.max(0.0);
        }
        let b = matmul_t(&a, m, 2 * d, &self.w2, d);
        for (xi, bi) in x.iter_mut().zip(&b) {
            *xi += bi;
        }
        Ok(layer_norm_rows(&x, d))
    }
}
