use candle_core::{DType, Tensor};
use safe_core::conditioning::{encode_caption, WeightVector};
use safe_core::diffusion::{attach_lora, ddim_sample, DenoiserConfig, TinyDenoiser};
use safe_core::synthetic::natural_image;
use safe_core::trainer::{
    attach_adapters, epoch_order, run_training, train_step, Checkpoint, TrainConfig, TrainSample,
};
use safe_core::zoo::{
    registry, LinearAutoencoder, TextEncoder, TinyAlignmentScorer, TinyTextEncoder,
};

fn encoder() -> TinyTextEncoder {
    registry::text_encoder(registry::TEXT_ENCODER).unwrap()
}

fn backbone(enc: &TinyTextEncoder) -> TinyDenoiser {
    registry::backbone(registry::BACKBONE, enc.width()).unwrap()
}

fn samples(enc: &TinyTextEncoder, n: usize) -> Vec<TrainSample> {
    let ae = LinearAutoencoder::default();
    let captions = [
        "Firefighters battle a blaze at a warehouse near the river",
        "The senator speaks to reporters outside the capitol",
        "Fans celebrate after the home team wins the final",
        "Farmers inspect crops damaged by the late frost",
        "Protesters march through the city centre on Saturday",
        "A new bridge opens to traffic after years of delays",
    ];
    (0..n)
        .map(|i| {
            let caption = captions[i % captions.len()];
            let emb = encode_caption(caption, enc).unwrap();
            let w = WeightVector::ones(emb.len());
            TrainSample::new(
                &format!("r{i}"),
                caption,
                &natural_image(32, 32, i as u64),
                &ae,
                DType::F32,
                emb,
                w,
            )
            .unwrap()
        })
        .collect()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn adapters_are_exact_noop_at_init() {
    let enc = encoder();
    let base = backbone(&enc);
    let mut adapted = base.clone();
    let sites = attach_lora(&mut adapted, 4, 4.0, false, 11).unwrap();
    assert_eq!(sites.len(), 8);
    let x = safe_core::diffusion::seeded_normal(1, (16, 4), DType::F32).unwrap();
    let ctx = encode_caption("a quiet street at night", &enc)
        .unwrap()
        .to_tensor(DType::F32)
        .unwrap();
    let a: Vec<f32> = base
        .forward(&x, 50, &ctx, (4, 4))
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let b: Vec<f32> = adapted
        .forward(&x, 50, &ctx, (4, 4))
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn cross_only_and_rank_limits() {
    let enc = encoder();
    let mut d = backbone(&enc);
    assert_eq!(
        attach_lora(&mut d.clone(), 4, 4.0, true, 1).unwrap().len(),
        4
    );
    let err = attach_lora(&mut d, 32, 32.0, false, 1).unwrap_err();
    assert_eq!(err.code(), "rank_too_large");
    assert!(
        d.layers().iter().all(|l| l.adapter.is_none()),
        "failed attach must leave the model untouched"
    );
}

#[test]
fn sampling_is_deterministic_and_finite() {
    let enc = encoder();
    let d = backbone(&enc);
    let cond = encode_caption("crowds gather in the square", &enc)
        .unwrap()
        .to_tensor(DType::F32)
        .unwrap();
    let uncond = safe_core::conditioning::encode_unconditional(&enc)
        .unwrap()
        .to_tensor(DType::F32)
        .unwrap();
    let run = |seed| -> Vec<f32> {
        ddim_sample(&d, &cond, &uncond, (4, 4), 20, 7.5, seed)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    };
    let (a, b, c) = (run(42), run(42), run(3));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|v| v.is_finite() && v.abs() < 50.0));
}

#[test]
fn training_moves_adapters_but_not_base() {
    let enc = encoder();
    let mut d = backbone(&enc);
    let before = d.base_fingerprint().unwrap();
    let data = samples(&enc, 4);
    let cfg = quick_config();
    let mut state = attach_adapters(&mut d, &cfg).unwrap();
    let batch: Vec<&TrainSample> = data.iter().take(2).collect();
    let scorer: TinyAlignmentScorer = registry::scorer(registry::REWARD).unwrap();
    let ae = LinearAutoencoder::default();
    for _ in 0..3 {
        let out = train_step(&mut state, &d, &batch, &ae, &scorer, &cfg).unwrap();
        assert!(out.loss.is_finite() && !out.skipped);
    }
    assert_eq!(d.base_fingerprint().unwrap(), before);
    let b_norm: f64 = state
        .adapter_params
        .iter()
        .map(|p| {
            p.b.as_tensor()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap() as f64
        })
        .sum();
    assert!(
        b_norm > 0.0,
        "adapter B factors should leave zero after updates"
    );
    // Adapter parameter count: rank * (in + out) per adapted site.
    let expected: usize = d
        .layers()
        .iter()
        .filter(|l| l.adapter.is_some())
        .map(|l| 8 * (l.in_dim() + l.out_dim()))
        .sum();
    assert_eq!(state.trainable_parameter_count(), expected);
}

#[test]
fn checkpoint_roundtrip_and_resume_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let enc = encoder();
    let data = samples(&enc, 4);
    let cfg = quick_config();
    let scorer: TinyAlignmentScorer = registry::scorer(registry::REWARD).unwrap();
    let ae = LinearAutoencoder::default();

    let mut straight = backbone(&enc);
    let full = run_training(
        &data,
        &cfg,
        &mut straight,
        &ae,
        &scorer,
        Some(&dir.path().join("full.safetensors")),
        None,
        None,
    )
    .unwrap();
    assert_eq!(full.state.global_step, 4);

    let mut first = backbone(&enc);
    let half = dir.path().join("half.safetensors");
    run_training(
        &data,
        &cfg,
        &mut first,
        &ae,
        &scorer,
        Some(&half),
        None,
        Some(2),
    )
    .unwrap();
    let mut resumed = backbone(&enc);
    let rest = run_training(
        &data,
        &cfg,
        &mut resumed,
        &ae,
        &scorer,
        None,
        Some(&half),
        None,
    )
    .unwrap();
    assert_eq!(rest.state.global_step, 4);
    for (a, b) in full.checkpoint.tensors.iter().zip(&rest.checkpoint.tensors) {
        assert_eq!(a.0, b.0);
        let (x, y): (Vec<f32>, Vec<f32>) = (
            a.1.flatten_all().unwrap().to_vec1().unwrap(),
            b.1.flatten_all().unwrap().to_vec1().unwrap(),
        );
        assert_eq!(x, y, "tensor {} differs after resume", a.0);
    }
    assert_eq!(full.state.reward_history, rest.state.reward_history);

    let loaded = Checkpoint::load(&dir.path().join("full.safetensors")).unwrap();
    assert_eq!(loaded.meta.global_step, 4);
    assert_eq!(loaded.meta.config, cfg);
}

#[test]
fn corrupted_or_foreign_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let enc = encoder();
    let data = samples(&enc, 2);
    let cfg = TrainConfig {
        epochs: 1,
        ..quick_config()
    };
    let scorer: TinyAlignmentScorer = registry::scorer(registry::REWARD).unwrap();
    let ae = LinearAutoencoder::default();
    let path = dir.path().join("ck.safetensors");
    let mut d = backbone(&enc);
    run_training(&data, &cfg, &mut d, &ae, &scorer, Some(&path), None, None).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x55;
    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(
        Checkpoint::load(&bad).unwrap_err().code(),
        "checkpoint_integrity"
    );
    std::fs::write(&bad, &bytes[..n / 2]).unwrap();
    assert_eq!(
        Checkpoint::load(&bad).unwrap_err().code(),
        "checkpoint_integrity"
    );

    let ck = Checkpoint::load(&path).unwrap();
    let mut other = TinyDenoiser::new(
        registry::BACKBONE,
        &DenoiserConfig::standard(enc.width()),
        999,
    )
    .unwrap();
    let err = safe_core::trainer::load_adapters(&mut other, &ck).unwrap_err();
    assert_eq!(err.code(), "checkpoint_incompatible");
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(10, 42, 0);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(10, 42, 0));
    assert_ne!(a, epoch_order(10, 42, 1));
}

#[test]
fn nonfinite_loss_skips_update() {
    let enc = encoder();
    let mut d = backbone(&enc);
    let mut data = samples(&enc, 1);
    data[0].latent = Tensor::full(
        f32::NAN,
        data[0].latent.dims2().unwrap(),
        &candle_core::Device::Cpu,
    )
    .unwrap();
    let cfg = quick_config();
    let mut state = attach_adapters(&mut d, &cfg).unwrap();
    let before: Vec<f32> = state.adapter_params[0]
        .a
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let scorer: TinyAlignmentScorer = registry::scorer(registry::REWARD).unwrap();
    let out = train_step(
        &mut state,
        &d,
        &[&data[0]],
        &LinearAutoencoder::default(),
        &scorer,
        &cfg,
    )
    .unwrap();
    assert!(out.skipped);
    assert_eq!(state.skipped_nonfinite, 1);
    assert_eq!(state.global_step, 1);
    let after: Vec<f32> = state.adapter_params[0]
        .a
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    assert_eq!(before, after);
}
