use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safe_core::eval::{
    build_report, entity_metrics, frechet_distance, score_alignment, validate_report, EvalReport,
    FeatureSet, SeedRun,
};
use safe_core::grounding::{build_profile, cosine_similarity, FaceEmbedder};
use safe_core::imaging::FaceDetector;
use safe_core::synthetic::{draw_face, identity_texture, natural_image};
use safe_core::zoo::{registry, AlignmentScorer, MarkerFaceDetector, PatchFaceEmbedder};

fn gaussian_rows(n: usize, d: usize, mu: f64, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mu, sigma).unwrap();
    (0..n)
        .map(|_| (0..d).map(|_| dist.sample(&mut rng)).collect())
        .collect()
}

fn set(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::new("test", rows).unwrap()
}

#[test]
fn one_dimensional_closed_form() {
    let n = 100_000;
    let (ma, sa, mb, sb) = (0.0, 1.0, 1.5, 2.0);
    let a = set(&gaussian_rows(n, 1, ma, sa, 1));
    let b = set(&gaussian_rows(n, 1, mb, sb, 2));
    let expected: f64 = (ma - mb).powi(2) + (sa - sb).powi(2);
    let got = frechet_distance(&a, &b).unwrap();
    assert!(
        (got - expected).abs() / expected < 0.02,
        "{got} vs {expected}"
    );
}

#[test]
fn self_distance_and_dimension_check() {
    let a = set(&gaussian_rows(200, 6, 0.3, 1.2, 3));
    assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    let b = set(&gaussian_rows(200, 5, 0.3, 1.2, 3));
    assert_eq!(
        frechet_distance(&a, &b).unwrap_err().code(),
        "dimension_mismatch"
    );
    let one = set(&gaussian_rows(1, 6, 0.0, 1.0, 3));
    assert!(frechet_distance(&a, &one).is_err());
}

#[test]
fn covariance_is_unbiased_and_symmetric() {
    let rows = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 7.0]];
    let s = set(&rows);
    let c = s.covariance().unwrap();
    // var(x) with n-1: mean 3, squares 4+0+4 = 8 / 2
    assert!((c[(0, 0)] - 4.0).abs() < 1e-12);
    assert!((c[(0, 1)] - c[(1, 0)]).abs() < 1e-8);
}

fn rows_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..5).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 3..20),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 3..20),
            prop::collection::vec(-5.0f64..5.0, d),
        )
    })
}

proptest! {
    #[test]
    fn frechet_symmetric_nonnegative_translation_invariant((a, b, shift) in rows_strategy()) {
        let (fa, fb) = (set(&a), set(&b));
        let ab = frechet_distance(&fa, &fb).unwrap();
        let ba = frechet_distance(&fb, &fa).unwrap();
        prop_assert!(ab >= -1e-8);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0), "{} vs {}", ab, ba);
        prop_assert!(frechet_distance(&fa, &fa).unwrap() <= 1e-6);
        let mv = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect::<Vec<Vec<f64>>>();
        let shifted = frechet_distance(&set(&mv(&a)), &set(&mv(&b))).unwrap();
        prop_assert!((shifted - ab).abs() <= 1e-6 * ab.abs().max(1.0));
    }
}

#[test]
fn alignment_scores_are_deterministic_and_mean_recomputes() {
    let scorer = registry::scorer(registry::REWARD).unwrap();
    let imgs: Vec<RgbImage> = (0..3).map(|i| natural_image(32, 32, i)).collect();
    let caps: Vec<String> = ["a red boat", "city lights", "a green field"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let doubled_imgs: Vec<RgbImage> = imgs.iter().chain(&imgs).cloned().collect();
    let doubled_caps: Vec<String> = caps.iter().chain(&caps).cloned().collect();
    let s = score_alignment(
        &doubled_imgs,
        &doubled_caps,
        Some(&scorer as &dyn AlignmentScorer),
    )
    .unwrap();
    assert_eq!(s.per_sample[..3], s.per_sample[3..]);
    let recomputed = s.per_sample.iter().sum::<f64>() / s.per_sample.len() as f64;
    assert!((recomputed - s.mean).abs() < 1e-12);
    assert_eq!(
        score_alignment(&imgs, &caps, None).unwrap_err().code(),
        "model_unavailable"
    );
    assert!(score_alignment(&imgs, &caps[..2], Some(&scorer as &dyn AlignmentScorer)).is_err());
}

fn face_image(identities: &[(u32, u32, u32, u32)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(96, 64, Rgb([30, 40, 90]));
    for &(k, x, y, s) in identities {
        draw_face(&mut img, x, y, s, s, &identity_texture(k));
    }
    img
}

#[test]
fn entity_metrics_vacuous_self_match_and_argmax() {
    let det = MarkerFaceDetector::default();
    let rec = PatchFaceEmbedder;
    let reference = face_image(&[(5, 20, 10, 30)]);
    let profile = build_profile(
        "E5",
        "Entity Five",
        std::path::Path::new("ref.png"),
        &reference,
        &det,
        &rec,
    )
    .unwrap();

    let blank = natural_image(96, 64, 9);
    let none = entity_metrics(&[(&blank, &profile), (&blank, &profile)], &det, &rec).unwrap();
    assert_eq!(none.detect_accuracy, 0.0);
    assert_eq!(none.identity_preservation, None);

    let own = entity_metrics(&[(&reference, &profile)], &det, &rec).unwrap();
    assert!(own.identity_preservation.unwrap() >= 0.99);

    // three faces per image: the reported score is the exhaustive maximum
    for trial in 0..5u32 {
        let img = face_image(&[
            (trial + 1, 2, 4, 24),
            (5, 34, 20, 28),
            (trial + 20, 66, 8, 26),
        ]);
        let m = entity_metrics(&[(&img, &profile)], &det, &rec).unwrap();
        let faces = det.detect(&img).unwrap();
        assert_eq!(faces.len(), 3);
        let oracle = faces
            .iter()
            .map(|f| {
                cosine_similarity(&rec.embed(&img, f).unwrap(), &profile.reference_embedding)
                    .unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(m.per_image[0], Some(oracle));
        assert_eq!(m.detect_accuracy, 1.0);
    }

    // removing a non-max face leaves the score unchanged
    let full = face_image(&[(11, 2, 4, 24), (5, 34, 20, 28)]);
    let reduced = face_image(&[(5, 34, 20, 28)]);
    let a = entity_metrics(&[(&full, &profile)], &det, &rec)
        .unwrap()
        .per_image[0];
    let b = entity_metrics(&[(&reduced, &profile)], &det, &rec)
        .unwrap()
        .per_image[0];
    assert_eq!(a, b);

    let mixed = entity_metrics(&[(&reference, &profile), (&blank, &profile)], &det, &rec).unwrap();
    assert_eq!(mixed.detect_accuracy, 0.5);
}

fn run(seed: u64, fid: f64, reward: &[f64]) -> SeedRun {
    let mean = reward.iter().sum::<f64>() / reward.len() as f64;
    let s = safe_core::eval::AlignmentScores {
        scorer_id: "r".into(),
        per_sample: reward.to_vec(),
        mean,
    };
    SeedRun {
        seed,
        sample_count: reward.len(),
        fid: Some(fid),
        image_reward: Some(s.clone()),
        hps: Some(s),
        entity: None,
    }
}

#[test]
fn report_averages_seeds_and_roundtrips() {
    let runs = vec![run(42, 2.0, &[0.1, 0.3]), run(3, 4.0, &[0.5, 0.7])];
    let prov = BTreeMap::from([("checkpoint".to_string(), "abc".to_string())]);
    let report = build_report("SAFE", runs, false, prov);
    assert_eq!(report.fid, Some(3.0));
    assert!((report.image_reward_mean.unwrap() - 0.4).abs() < 1e-12);
    assert_eq!(report.detect_accuracy, None);
    validate_report(&report).unwrap();

    let text = report.to_jsonl().unwrap();
    assert_eq!(EvalReport::from_jsonl(&text).unwrap(), report);

    let table = report.table();
    let header = table.lines().next().unwrap();
    let (f, i, h) = (
        header.find("FID_CLIP").unwrap(),
        header.find("ImageReward").unwrap(),
        header.find("HPS V2").unwrap(),
    );
    assert!(f < i && i < h);
}

#[test]
fn partial_reports_mark_absent_metrics() {
    let mut r = run(42, 1.0, &[0.2]);
    r.hps = None;
    let report = build_report("partial", vec![r], false, BTreeMap::new());
    assert_eq!(report.hps_mean, None);
    let text = report.to_jsonl().unwrap();
    assert!(text.contains(r#""name":"hps_v2","value":null"#));
    assert!(report.table().contains("n/a"));
    validate_report(&report).unwrap();

    let mut bad = report.clone();
    bad.entity_mode = true;
    assert!(validate_report(&bad).is_err());
}
