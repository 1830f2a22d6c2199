use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::{Linear, SiteKind};
use super::schedule::NoiseSchedule;
use crate::zoo::dense::mix_seed;
use crate::Result;

const POS_FEATURES: usize = 8;
const TIME_FEATURES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub dim: usize,
    pub text_width: usize,
    pub mlp_mult: usize,
    pub timesteps: usize,
    /// Init scale of the output projection, relative to `1/sqrt(dim)`.
    pub out_gain: f64,
}

impl DenoiserConfig {
    pub fn standard(text_width: usize) -> Self {
        DenoiserConfig {
            latent_channels: 4,
            dim: 32,
            text_width,
            mlp_mult: 2,
            timesteps: 100,
            out_gain: 0.5,
        }
    }
}

/// Token-wise transformer noise predictor over latent patches: input
/// projection with position/time features, one self-attention, one
/// cross-attention over the text states, an MLP and an output projection.
/// The prediction adds the closed-form optimum for a unit-Gaussian latent
/// prior, `sqrt(1 - alpha_bar) * x_t`, so sampling is stable before training.
#[derive(Debug, Clone)]
pub struct TinyDenoiser {
    id: String,
    pub config: DenoiserConfig,
    schedule: NoiseSchedule,
    dtype: DType,
    layers: Vec<Linear>,
}

const IN: usize = 0;
const TIME: usize = 1;
const SQ: usize = 2;
const SK: usize = 3;
const SV: usize = 4;
const SO: usize = 5;
const CQ: usize = 6;
const CK: usize = 7;
const CV: usize = 8;
const CO: usize = 9;
const M1: usize = 10;
const M2: usize = 11;
const OUT: usize = 12;

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dims()[1] as f64;
    let scores = (q.matmul(&k.t()?)? / d.sqrt())?;
    Ok(softmax_rows(&scores)?.matmul(v)?)
}

impl TinyDenoiser {
    pub fn new(id: &str, config: &DenoiserConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(id, config, seed, DType::F32)
    }

    pub fn with_dtype(id: &str, config: &DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        let (c, d, tw, h) = (
            config.latent_channels,
            config.dim,
            config.text_width,
            config.dim * config.mlp_mult,
        );
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        use SiteKind::*;
        let specs: [(&str, SiteKind, usize, usize, f64); 13] = [
            ("in_proj", Other, d, c + POS_FEATURES, inv(c + POS_FEATURES)),
            ("time_proj", Other, d, TIME_FEATURES, inv(TIME_FEATURES)),
            ("self_attn.q", SelfAttention, d, d, inv(d)),
            ("self_attn.k", SelfAttention, d, d, inv(d)),
            ("self_attn.v", SelfAttention, d, d, inv(d)),
            ("self_attn.out", SelfAttention, d, d, inv(d)),
            ("cross_attn.q", CrossAttention, d, d, inv(d)),
            ("cross_attn.k", CrossAttention, d, tw, inv(tw)),
            ("cross_attn.v", CrossAttention, d, tw, inv(tw)),
            ("cross_attn.out", CrossAttention, d, d, inv(d)),
            ("mlp.fc1", Other, h, d, inv(d)),
            ("mlp.fc2", Other, d, h, inv(h)),
            ("out_proj", Other, c, d, config.out_gain * inv(d)),
        ];
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, (name, kind, o, n, std))| {
                Linear::new(name, *kind, *o, *n, *std, mix_seed(seed, i as u64), dtype)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TinyDenoiser {
            id: id.to_string(),
            config: config.clone(),
            schedule: NoiseSchedule::new(config.timesteps)?,
            dtype,
            layers,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<TinyDenoiser> {
        Ok(TinyDenoiser {
            id: self.id.clone(),
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            dtype,
            layers: self
                .layers
                .iter()
                .map(|l| l.to_dtype(dtype))
                .collect::<Result<_>>()?,
        })
    }

    /// SHA-256 over every base weight (names, shapes and values), adapters excluded.
    pub fn base_fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        for l in &self.layers {
            h.update(l.name.as_bytes());
            for d in l.weight.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let v: Vec<f64> = l.weight.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn grid_features(&self, (gh, gw): (usize, usize)) -> Result<Tensor> {
        let mut f = Vec::with_capacity(gh * gw * POS_FEATURES);
        for y in 0..gh {
            for x in 0..gw {
                let (fy, fx) = ((y as f64 + 0.5) / gh as f64, (x as f64 + 0.5) / gw as f64);
                for k in 1..=2 {
                    let w = std::f64::consts::PI * k as f64;
                    f.extend([
                        (w * fy).sin(),
                        (w * fy).cos(),
                        (w * fx).sin(),
                        (w * fx).cos(),
                    ]);
                }
            }
        }
        Ok(Tensor::from_vec(f, (gh * gw, POS_FEATURES), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn time_features(&self, t: usize) -> Result<Tensor> {
        let pos = t as f64 / self.schedule.timesteps() as f64;
        let f: Vec<f64> = (0..TIME_FEATURES / 2)
            .flat_map(|k| {
                let w = std::f64::consts::PI * (1u64 << k) as f64;
                [(w * pos).sin(), (w * pos).cos()]
            })
            .collect();
        Ok(Tensor::from_vec(f, (1, TIME_FEATURES), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Noise prediction for latent tokens `x (n x c)` on a `grid` at level `t`,
    /// conditioned on text states `context (m x text_width)`.
    pub fn forward(
        &self,
        x: &Tensor,
        t: usize,
        context: &Tensor,
        grid: (usize, usize),
    ) -> Result<Tensor> {
        let l = &self.layers;
        let input = Tensor::cat(&[x, &self.grid_features(grid)?], 1)?;
        let temb = l[TIME].forward(&self.time_features(t)?)?;
        let mut h = l[IN].forward(&input)?.broadcast_add(&temb)?;
        let n = layer_norm(&h)?;
        h = (&h
            + l[SO].forward(&attention(
                &l[SQ].forward(&n)?,
                &l[SK].forward(&n)?,
                &l[SV].forward(&n)?,
            )?)?)?;
        let n = layer_norm(&h)?;
        let cross = attention(
            &l[CQ].forward(&n)?,
            &l[CK].forward(context)?,
            &l[CV].forward(context)?,
        )?;
        h = (&h + l[CO].forward(&cross)?)?;
        let n = layer_norm(&h)?;
        h = (&h + l[M2].forward(&l[M1].forward(&n)?.gelu()?)?)?;
        let residual = l[OUT].forward(&layer_norm(&h)?)?;
        let (_, noise_coeff) = self.schedule.coefficients(t);
        Ok(((x * noise_coeff)? + residual)?)
    }
}
