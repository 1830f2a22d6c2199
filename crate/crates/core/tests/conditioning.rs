use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safe_core::conditioning::{
    build_weight_vector, condition_embeddings, encode_caption, scale_exponent_to_beta,
    subject_conditioning, EmbeddingSequence, TokenSpan, WeightVector,
};
use safe_core::subjects::{annotate, LlmFamily, SubjectAnnotation};
use safe_core::zoo::{registry, TextEncoder};

const WORDS: &[&str] = &[
    "protesters",
    "gather",
    "outside",
    "the",
    "parliament",
    "building",
    "firefighters",
    "battle",
    "a",
    "blaze",
    "near",
    "river",
    "children",
    "play",
    "in",
    "snow",
    "after",
    "storm",
    "mayor",
    "opens",
    "new",
    "bridge",
];

fn random_caption(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..20);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_sequence(rng: &mut ChaCha8Rng, m: usize, d: usize) -> EmbeddingSequence {
    let vectors = (0..m * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    EmbeddingSequence::new((0..m as u32).collect(), vectors, d).unwrap()
}

/// Reference: per-index loop over the span list.
#[allow(clippy::needless_range_loop)]
fn oracle_weights(m: usize, spans: &[TokenSpan], beta: f64) -> Vec<f64> {
    let mut w = vec![1.0; m];
    for i in 0..m {
        for &(s, e) in spans {
            if s <= i && i <= e {
                w[i] = beta;
            }
        }
    }
    w
}

/// Maximal runs of set bits in `mask`, as inclusive spans.
fn runs(mask: u32, m: usize) -> Vec<TokenSpan> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < m {
        if mask >> i & 1 == 1 {
            let s = i;
            while i + 1 < m && mask >> (i + 1) & 1 == 1 {
                i += 1;
            }
            out.push((s, i));
        }
        i += 1;
    }
    out
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn all_ones_is_bit_identical_on_random_captions() {
    let enc = registry::text_encoder(registry::TEXT_ENCODER).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let caption = random_caption(&mut rng);
        let base = encode_caption(&caption, &enc).unwrap();
        for renorm in [false, true] {
            let out = condition_embeddings(&base, &WeightVector::ones(base.len()), renorm).unwrap();
            let bits =
                |s: &EmbeddingSequence| s.vectors.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&out), bits(&base), "{caption}");
        }
    }
}

#[test]
fn exhaustive_span_sets_match_the_per_index_loop() {
    let betas: Vec<f64> = (0..=4)
        .map(|k| scale_exponent_to_beta(k).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in 1..=12usize {
        let base = random_sequence(&mut rng, m, 3);
        for mask in 0u32..(1 << m) {
            let spans = runs(mask, m);
            for &beta in &betas {
                let w = build_weight_vector(m, &spans, beta, &[]).unwrap();
                assert_eq!(
                    w.weights,
                    oracle_weights(m, &spans, beta),
                    "m={m} mask={mask:b}"
                );
                let out = condition_embeddings(&base, &w, false).unwrap();
                for i in 0..m {
                    let (a, b) = (norm(out.row(i)), w.weights[i] * norm(base.row(i)));
                    assert!(
                        (a - b).abs() <= 1e-6 * b.max(f64::MIN_POSITIVE),
                        "row {i}: {a} vs {b}"
                    );
                }
            }
        }
    }
}

#[test]
fn scaling_twice_by_one_step_equals_two_steps_once() {
    let b1 = scale_exponent_to_beta(1).unwrap();
    let b2 = scale_exponent_to_beta(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let m = rng.random_range(2..20);
        let base = random_sequence(&mut rng, m, 8);
        let spans = [(rng.random_range(0..m), m - 1)];
        let once = |b| build_weight_vector(m, &spans, b, &[]).unwrap();
        let twice = condition_embeddings(
            &condition_embeddings(&base, &once(b1), false).unwrap(),
            &once(b1),
            false,
        )
        .unwrap();
        let direct = condition_embeddings(&base, &once(b2), false).unwrap();
        for (a, b) in twice.vectors.iter().zip(&direct.vectors) {
            assert!((a - b).abs() as f64 <= 1e-5 * (b.abs() as f64).max(1.0));
        }
    }
}

#[test]
fn fallback_and_unit_beta_give_identity_weights() {
    let enc = registry::text_encoder(registry::TEXT_ENCODER).unwrap();
    let caption = "Firefighters battle a blaze near the river";
    let fb = SubjectAnnotation::fallback("r", "llm", LlmFamily::StructuredJson, "???");
    let (_, w) = subject_conditioning(caption, Some(&fb), &enc, 1.21).unwrap();
    assert!(w.is_identity());
    let (_, w) = subject_conditioning(caption, None, &enc, 1.21).unwrap();
    assert!(w.is_identity());

    let a = annotate(
        "r",
        caption,
        r#"{"main_subject":"Firefighters","additional_subjects":["river"]}"#,
        "llm",
        LlmFamily::StructuredJson,
    );
    let (base, w) = subject_conditioning(caption, Some(&a), &enc, 1.0).unwrap();
    assert!(w.is_identity());
    let (_, w) = subject_conditioning(caption, Some(&a), &enc, 1.21).unwrap();
    // begin marker, then "Firefighters"; "river" is the last word before the end marker
    assert_eq!(
        w.key_indices.iter().copied().collect::<Vec<_>>(),
        vec![1, base.len() - 2]
    );
}

#[test]
fn special_positions_are_never_weighted() {
    let enc = registry::text_encoder(registry::TEXT_ENCODER).unwrap();
    let base = encode_caption("a storm hits the coast", &enc).unwrap();
    let special: Vec<usize> = (0..base.len())
        .filter(|i| enc.tokenizer().is_special(base.tokens[*i]))
        .collect();
    assert_eq!(special, vec![0, base.len() - 1]);
    let w = build_weight_vector(base.len(), &[(0, base.len() - 1)], 1.21, &special).unwrap();
    assert_eq!((w.weights[0], w.weights[base.len() - 1]), (1.0, 1.0));
}

fn arb_spans(m: usize) -> impl Strategy<Value = Vec<TokenSpan>> {
    prop::collection::vec((0..m, 0..m).prop_map(|(a, b)| (a.min(b), a.max(b))), 0..6)
}

proptest! {
    #[test]
    fn weights_are_one_or_beta(m in 1usize..40, k in 0i64..=4, seed in any::<u64>()) {
        let beta = scale_exponent_to_beta(k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans: Vec<TokenSpan> = (0..rng.random_range(0..5))
            .map(|_| { let (a, b) = (rng.random_range(0..m), rng.random_range(0..m)); (a.min(b), a.max(b)) })
            .collect();
        let w = build_weight_vector(m, &spans, beta, &[]).unwrap();
        prop_assert_eq!(w.weights.len(), m);
        prop_assert!(w.weights.iter().all(|x| *x == 1.0 || *x == beta));
        prop_assert!(w.key_indices.iter().all(|i| w.weights[*i] == beta));
        // span order and duplication do not matter
        let mut rev = spans.clone();
        rev.reverse();
        rev.extend(spans.iter().copied());
        prop_assert_eq!(build_weight_vector(m, &rev, beta, &[]).unwrap(), w);
    }

    #[test]
    fn out_of_bounds_spans_are_rejected((m, spans) in (1usize..20).prop_flat_map(|m| (Just(m), arb_spans(m + 5)))) {
        let bad = spans.iter().any(|(_, e)| *e >= m);
        prop_assert_eq!(build_weight_vector(m, &spans, 1.1, &[]).is_err(), bad);
    }

    #[test]
    fn conditioning_is_rowwise(seed in any::<u64>(), m in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_sequence(&mut rng, m, 5);
        let spans = [(rng.random_range(0..m), m - 1)];
        let w = build_weight_vector(m, &spans, 1.331, &[]).unwrap();
        let out = condition_embeddings(&base, &w, false).unwrap();
        for i in 0..m {
            for (a, b) in out.row(i).iter().zip(base.row(i)) {
                prop_assert_eq!(*a, b * w.weights[i] as f32);
            }
        }
    }
}
