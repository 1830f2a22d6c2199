use candle_core::{DType, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use safe_core::conditioning::{build_weight_vector, encode_caption, scale_exponent_to_beta};
use safe_core::diffusion::TinyDenoiser;
use safe_core::synthetic::natural_image;
use safe_core::trainer::{
    attach_adapters, batch_loss, draw_step, run_training, sample_loss_timestep, train_step,
    LossMapping, TrainConfig, TrainSample,
};
use safe_core::zoo::{
    registry, LinearAutoencoder, TextEncoder, TinyAlignmentScorer, TinyTextEncoder,
};

fn stack() -> (
    TinyTextEncoder,
    TinyDenoiser,
    LinearAutoencoder,
    TinyAlignmentScorer,
) {
    let enc = registry::text_encoder(registry::TEXT_ENCODER).unwrap();
    let den = registry::backbone(registry::BACKBONE, enc.width()).unwrap();
    (
        enc,
        den,
        LinearAutoencoder::default(),
        registry::scorer(registry::REWARD).unwrap(),
    )
}

fn sample(enc: &TinyTextEncoder, ae: &LinearAutoencoder, i: u64, dtype: DType) -> TrainSample {
    let caption = [
        "Crowds gather in the square for the parade",
        "A ferry crosses the bay at dusk",
    ][i as usize % 2];
    let emb = encode_caption(caption, enc).unwrap();
    let w = build_weight_vector(
        emb.len(),
        &[(1, 1)],
        scale_exponent_to_beta(2).unwrap(),
        &[],
    )
    .unwrap();
    TrainSample::new(
        &format!("s{i}"),
        caption,
        &natural_image(32, 32, i),
        ae,
        dtype,
        emb,
        w,
    )
    .unwrap()
}

/// Pearson chi-square p-value for uniformity over `lo..=hi`.
fn uniformity_p(draws: &[usize], lo: usize, hi: usize) -> f64 {
    let k = hi - lo + 1;
    let mut counts = vec![0f64; k];
    for &d in draws {
        counts[d - lo] += 1.0;
    }
    let expected = draws.len() as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn loss_timesteps_are_uniform_on_the_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<usize> = (0..100_000)
        .map(|_| sample_loss_timestep((40, 99), &mut rng))
        .collect();
    assert!(draws.iter().all(|t| (40..=99).contains(t)));
    let p = uniformity_p(&draws, 40, 99);
    assert!(p > 0.001, "p = {p}");

    // the per-step draws used by training follow the same law
    let (enc, _, ae, _) = stack();
    let s = sample(&enc, &ae, 0, DType::F32);
    let cfg = TrainConfig::default();
    let steps: Vec<usize> = (0..3000)
        .map(|g| draw_step(&cfg, g, &[&s], DType::F32).unwrap()[0].t)
        .collect();
    assert!(steps.iter().all(|t| (40..=99).contains(t)));
    assert!(uniformity_p(&steps, 40, 99) > 0.001);
}

#[test]
fn autodiff_gradient_matches_finite_differences() {
    let (enc, den, ae, scorer) = stack();
    let mut den = den.to_dtype(DType::F64).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let data: Vec<TrainSample> = (0..2).map(|i| sample(&enc, &ae, i, DType::F64)).collect();
    let batch: Vec<&TrainSample> = data.iter().collect();
    let mut state = attach_adapters(&mut den, &cfg).unwrap();
    // one update so that both adapter factors are non-zero
    train_step(&mut state, &den, &batch, &ae, &scorer, &cfg).unwrap();

    let draws = draw_step(&cfg, 7, &batch, DType::F64).unwrap();
    let loss_at = |den: &TinyDenoiser| -> f64 {
        batch_loss(den, &ae, &scorer, &cfg, &batch, &draws)
            .unwrap()
            .0
            .to_scalar::<f64>()
            .unwrap()
    };
    let (loss, _) = batch_loss(&den, &ae, &scorer, &cfg, &batch, &draws).unwrap();
    let grads = loss.backward().unwrap();

    let h = 1e-6;
    let mut checked = 0;
    for param in state.adapter_params.iter().take(4) {
        for var in [&param.a, &param.b] {
            let g: Vec<f64> = grads
                .get(var.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let original = var.as_tensor().copy().unwrap();
            let flat: Vec<f64> = original.flatten_all().unwrap().to_vec1().unwrap();
            let shape = original.dims().to_vec();
            for idx in [0, flat.len() / 3, flat.len() - 1] {
                let probe = |delta: f64| {
                    let mut v = flat.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, shape.as_slice(), original.device()).unwrap())
                        .unwrap();
                    loss_at(&den)
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                var.set(&original).unwrap();
                let scale = g[idx].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (g[idx] - fd).abs() / scale <= 1e-4,
                    "{} [{idx}]: autodiff {} vs fd {fd}",
                    param.site,
                    g[idx]
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 24);
}

#[test]
fn base_weights_are_frozen_over_many_steps() {
    let (enc, mut den, ae, scorer) = stack();
    let before = den.base_fingerprint().unwrap();
    let data: Vec<TrainSample> = (0..4).map(|i| sample(&enc, &ae, i, DType::F32)).collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 60,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = run_training(&data, &cfg, &mut den, &ae, &scorer, None, None, None).unwrap();
    assert_eq!(out.state.global_step, 120);
    assert_eq!(den.base_fingerprint().unwrap(), before);
    assert_eq!(out.state.frozen_base_fingerprint, before);
}

#[test]
fn loss_mappings() {
    let r = Tensor::new(&[0.2f64, 0.6], &candle_core::Device::Cpu).unwrap();
    let neg = LossMapping::NegatedReward
        .apply(&r)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!((neg + 0.4).abs() < 1e-12);
    let hinge = LossMapping::Hinge { margin: 0.5 }
        .apply(&r)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!((hinge - 0.15).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = TrainConfig {
        loss_timestep_range: (40, 100),
        ..TrainConfig::default()
    };
    assert_eq!(bad.validate().unwrap_err().code(), "config_invalid");
    assert!(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        adapter_rank: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        loss_timestep_range: (60, 50),
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn draws_stay_in_any_window(lo in 0usize..99, span in 0usize..50, seed in any::<u64>()) {
        let hi = (lo + span).min(99);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let t = sample_loss_timestep((lo, hi), &mut rng);
            prop_assert!(lo <= t && t <= hi);
        }
    }

    #[test]
    fn step_draws_are_a_function_of_seed_and_step(seed in any::<u64>(), step in 0u64..10_000) {
        let (enc, _, ae, _) = stack();
        let s = sample(&enc, &ae, 1, DType::F32);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let a = draw_step(&cfg, step, &[&s, &s], DType::F32).unwrap();
        let b = draw_step(&cfg, step, &[&s, &s], DType::F32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.t, y.t);
            let (nx, ny): (Vec<f32>, Vec<f32>) = (x.noise.flatten_all().unwrap().to_vec1().unwrap(), y.noise.flatten_all().unwrap().to_vec1().unwrap());
            prop_assert_eq!(nx, ny);
        }
    }
}
