//! Small dense-math helpers shared by the built-in models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Derives an independent sub-seed for parameter `k` of a model.
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    crate::text::fnv1a(&[seed.to_le_bytes(), k.to_le_bytes()].concat())
}

pub fn gaussian64(seed: u64, n: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect::<Vec<f64>>()
}

pub fn gaussian(seed: u64, n: usize, std: f64) -> Vec<f32> {
    gaussian64(seed, n, std)
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

/// `x (n x k) · wᵀ` with `w` stored `out x k`.
pub fn matmul_t(x: &[f32], n: usize, k: usize, w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0f32; n * out];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        for o in 0..out {
            let wr = &w[o * k..(o + 1) * k];
            y[i * out + o] = row.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    y
}

/// Parameter-free layer norm over each row of width `d`.
pub fn layer_norm_rows(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}
