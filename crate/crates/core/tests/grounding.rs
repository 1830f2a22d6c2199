use std::collections::BTreeSet;

use image::RgbImage;
use proptest::prelude::*;

use safe_core::corpus::{CaptionRecord, EntityMention};
use safe_core::grounding::{
    build_entity_subset, build_profile, cosine_similarity, link_mentions, verify_entity_in_image,
    AliasLinker, EntityLinker, KbEntity, KnowledgeSnapshot, ProfileRepository, VerifiedPair,
};
use safe_core::synthetic::{draw_face, identity_texture, natural_image};
use safe_core::zoo::{MarkerFaceDetector, PatchFaceEmbedder};

fn entity(id: &str, name: &str, aliases: &[&str], popularity: f64) -> KbEntity {
    KbEntity {
        entity_id: id.into(),
        display_name: name.into(),
        aliases: aliases.iter().map(|s| s.to_string()).collect(),
        entity_type: "PERSON".into(),
        popularity,
        reference_image: None,
    }
}

fn portrait(identity: u32, size: u32) -> RgbImage {
    let mut img = natural_image(64, 48, identity as u64 + 300);
    draw_face(&mut img, 12, 8, size, size, &identity_texture(identity));
    img
}

#[test]
fn linking_by_alias_and_partial_name() {
    let kb = KnowledgeSnapshot::from_entities(
        "/kb",
        vec![
            entity("Q1", "Maria Alvarez", &["M. Alvarez"], 5.0),
            entity("Q2", "Jon Alvarez", &[], 1.0),
            entity("Q3", "Li Wei", &[], 1.0),
        ],
    );
    let linker = AliasLinker::new(kb);
    assert_eq!(
        linker
            .link("Maria Alvarez", "PERSON", "")
            .unwrap()
            .unwrap()
            .entity_id,
        "Q1"
    );
    assert_eq!(
        linker
            .link("M. Alvarez", "PERSON", "")
            .unwrap()
            .unwrap()
            .confidence,
        1.0
    );
    // ambiguous surname: popularity decides without context
    assert_eq!(
        linker
            .link("Alvarez", "PERSON", "")
            .unwrap()
            .unwrap()
            .entity_id,
        "Q1"
    );
    assert!(linker.link("Nobody Known", "PERSON", "").unwrap().is_none());
    assert!(linker.link("Li Wei", "ORG", "").unwrap().is_none());

    let mut r = CaptionRecord::new("r", "t", "Maria Alvarez meets Nobody Known");
    r.entity_mentions = vec![
        EntityMention::new("Maria Alvarez", "PERSON", (0, 13)),
        EntityMention::new("Nobody Known", "PERSON", (20, 32)),
    ];
    let l = link_mentions(&r, &linker).unwrap();
    assert_eq!(l.mentions.len(), 1);
    assert_eq!(l.unlinkable, vec!["Nobody Known".to_string()]);
}

#[test]
fn verification_separates_identities() {
    let det = MarkerFaceDetector::default();
    let emb = PatchFaceEmbedder;
    let reference = portrait(17, 28);
    let profile = build_profile("Q1", "A", "ref.png".as_ref(), &reference, &det, &emb).unwrap();
    assert!(profile.embedding_is_unit());

    let same = verify_entity_in_image(&portrait(17, 20), &profile, &det, &emb, 0.5).unwrap();
    assert!(same.present, "{same:?}");
    let other = verify_entity_in_image(&portrait(5, 20), &profile, &det, &emb, 0.5).unwrap();
    assert!(!other.present, "{other:?}");
    let none =
        verify_entity_in_image(&natural_image(64, 48, 1), &profile, &det, &emb, 0.5).unwrap();
    assert_eq!((none.present, none.similarity), (false, None));

    let faceless = build_profile(
        "Q2",
        "B",
        "x.png".as_ref(),
        &natural_image(64, 48, 2),
        &det,
        &emb,
    );
    assert_eq!(faceless.unwrap_err().code(), "reference_without_face");
}

#[test]
fn profiles_roundtrip_through_the_repository() {
    let dir = tempfile::tempdir().unwrap();
    let det = MarkerFaceDetector::default();
    let reference = portrait(9, 24);
    let mut profile = build_profile(
        "Q/9",
        "Nine",
        "ref.png".as_ref(),
        &reference,
        &det,
        &PatchFaceEmbedder,
    )
    .unwrap();
    profile.sample_count = 44;
    let repo = ProfileRepository::new(dir.path());
    let saved = repo.save(&profile, &reference).unwrap();
    let loaded = repo.load("Q/9").unwrap();
    assert_eq!(loaded, saved);
    assert_eq!(loaded.reference_embedding, profile.reference_embedding);
    assert_eq!(repo.load_all().unwrap().len(), 1);
}

#[test]
fn cosine_is_bounded_and_checks_inputs() {
    assert!((cosine_similarity(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((cosine_similarity(&[1.0, 0.0], &[-3.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(
        cosine_similarity(&[1.0], &[1.0, 2.0]).unwrap_err().code(),
        "dimension_mismatch"
    );
    assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).is_err());
}

fn arb_pairs() -> impl Strategy<Value = Vec<VerifiedPair>> {
    prop::collection::vec((0u8..6, any::<bool>(), 0u16..500), 0..120).prop_map(|v| {
        v.into_iter()
            .map(|(e, present, r)| VerifiedPair {
                record_id: format!("r{r}"),
                entity_id: format!("E{e}"),
                present,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn entity_subset_keeps_exactly_the_large_verified_classes(pairs in arb_pairs(), min in 1usize..10) {
        let known: BTreeSet<String> = (0..5).map(|e| format!("E{e}")).collect();
        let subset = build_entity_subset(&pairs, &known, min);
        let count = |e: &str| pairs.iter().filter(|p| p.present && p.entity_id == e).count();
        for p in &subset.pairs {
            prop_assert!(p.present && known.contains(&p.entity_id) && count(&p.entity_id) >= min);
        }
        for e in &known {
            let n = count(e);
            let kept = subset.pairs.iter().filter(|p| &p.entity_id == e).count();
            prop_assert_eq!(kept, if n >= min { n } else { 0 });
            prop_assert_eq!(subset.counts.get(e).copied(), (n >= min).then_some(n));
            prop_assert_eq!(subset.dropped_entities.get(e).copied(), (n > 0 && n < min).then_some(n));
        }
        prop_assert!(subset.pairs.iter().all(|p| p.entity_id != "E5"));
    }

    #[test]
    fn cosine_in_unit_interval(a in prop::collection::vec(-10f32..10.0, 4), b in prop::collection::vec(-10f32..10.0, 4)) {
        if let Ok(s) = cosine_similarity(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
