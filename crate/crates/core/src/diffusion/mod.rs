//! Latent denoiser, noise schedule, low-rank adapters and the guided DDIM
//! sampler.

pub mod denoiser;
pub mod lora;
pub mod schedule;

pub use denoiser::{DenoiserConfig, TinyDenoiser};
pub use lora::{Adapter, Linear, SiteKind};
pub use schedule::{NoiseSchedule, DEFAULT_TIMESTEPS};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::zoo::dense::mix_seed;
use crate::Result;

/// Attaches adapters to every attention projection (cross-attention only if
/// `cross_only`), all-or-nothing. Returns the adapted site names.
pub fn attach_lora(
    denoiser: &mut TinyDenoiser,
    rank: usize,
    alpha: f64,
    cross_only: bool,
    seed: u64,
) -> Result<Vec<String>> {
    let wanted = |k: SiteKind| {
        if cross_only {
            k == SiteKind::CrossAttention
        } else {
            k.is_attention()
        }
    };
    let mut staged = denoiser.clone();
    let mut names = Vec::new();
    for (i, layer) in staged.layers_mut().iter_mut().enumerate() {
        if wanted(layer.kind) {
            layer.attach(rank, alpha, mix_seed(seed, 1000 + i as u64))?;
            names.push(layer.name.clone());
        }
    }
    *denoiser = staged;
    Ok(names)
}

/// Standard-normal tensor of `shape` drawn from `seed`.
pub fn seeded_normal(
    seed: u64,
    shape: (usize, usize),
    dtype: candle_core::DType,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Deterministic DDIM (eta = 0) with classifier-free guidance, starting from
/// seeded Gaussian latents. Returns the final clean latent tokens.
pub fn ddim_sample(
    denoiser: &TinyDenoiser,
    cond: &Tensor,
    uncond: &Tensor,
    grid: (usize, usize),
    steps: usize,
    guidance_scale: f64,
    seed: u64,
) -> Result<Tensor> {
    let schedule = denoiser.schedule();
    let mut x = seeded_normal(
        seed,
        (grid.0 * grid.1, denoiser.config.latent_channels),
        denoiser.dtype(),
    )?;
    let levels = schedule.inference_timesteps(steps)?;
    for (i, &t) in levels.iter().enumerate() {
        let eps_u = denoiser.forward(&x, t, uncond, grid)?;
        let eps_c = denoiser.forward(&x, t, cond, grid)?;
        let eps = (&eps_u + ((eps_c - &eps_u)? * guidance_scale)?)?;
        let clean = schedule.predict_clean(&x, &eps, t)?;
        let prev = levels
            .get(i + 1)
            .map(|&p| schedule.alpha_bar(p))
            .unwrap_or(1.0);
        x = ((clean * prev.sqrt())? + (eps * (1.0 - prev).sqrt())?)?;
    }
    Ok(x)
}
