use std::collections::BTreeSet;

use proptest::prelude::*;

use safe_core::corpus::{
    assign_splits, cluster_categories, compute_corpus_stats, default_excluded_types,
    filter_caption, split_sizes, tag_entities, CaptionRecord, EntityMention, GazetteerNer, Split,
    TrigramSimilarity, RULE_CATEGORY, RULE_EXCLUDED_ENTITIES, RULE_MIN_WORDS, RULE_UNTOKENIZABLE,
};

fn rec(id: &str, caption: &str) -> CaptionRecord {
    CaptionRecord::new(id, "test", caption)
}

#[test]
fn excluded_types_follow_the_recognizer() {
    let ner = GazetteerNer::new([
        ("New York", "GPE"),
        ("Monday", "DATE"),
        ("Red Cross", "ORG"),
    ]);
    let ex = default_excluded_types();
    let cases = [
        ("Snow falls over New York as commuters head to work", false),
        ("Snow falls on Monday as commuters head to work", true),
        (
            "Volunteers from the Red Cross hand out blankets to families",
            false,
        ),
        (
            "Volunteers hand out blankets to families at the shelter",
            true,
        ),
    ];
    for (caption, expected) in cases {
        let r = tag_entities(rec("a", caption), Some(&ner)).unwrap();
        let (r, pass) = filter_caption(r, 6, &ex).unwrap();
        assert_eq!(pass, expected, "{caption}");
        assert_eq!(r.passed(RULE_EXCLUDED_ENTITIES), expected);
        assert!(r.passed(RULE_MIN_WORDS));
    }
    // an empty exclusion set disables the rule entirely
    let r = tag_entities(rec("a", cases[0].0), Some(&ner)).unwrap();
    let (r, pass) = filter_caption(r, 6, &BTreeSet::new()).unwrap();
    assert!(pass && r.verdict(RULE_EXCLUDED_ENTITIES).is_none());
}

#[test]
fn provided_annotations_win_and_overlaps_collapse() {
    let mut r = rec("a", "Leaders meet in Paris France for climate talks today");
    r.provided_entities = Some(vec![
        EntityMention::new("Paris France", "GPE", (16, 28)),
        EntityMention::new("Paris", "GPE", (16, 21)),
        EntityMention::new("bogus", "ORG", (40, 99)),
    ]);
    let tagged = tag_entities(r, None).unwrap();
    assert_eq!(
        tagged.entity_mentions,
        vec![EntityMention::new("Paris France", "GPE", (16, 28))]
    );
    assert!(tagged.mentions_well_formed());
    assert_eq!(
        tag_entities(rec("b", "no annotations here"), None)
            .unwrap_err()
            .code(),
        "ner_backend_unavailable"
    );
}

#[test]
fn malformed_and_empty_captions() {
    let (r, pass) = filter_caption(
        rec("a", "bad \u{FFFD} bytes in this long caption here"),
        6,
        &BTreeSet::new(),
    )
    .unwrap();
    assert!(!pass && !r.passed(RULE_UNTOKENIZABLE));
    assert_eq!(
        filter_caption(rec("a", "   "), 6, &BTreeSet::new())
            .unwrap_err()
            .code(),
        "empty_caption"
    );
    assert!(filter_caption(rec("a", "x"), 0, &BTreeSet::new()).is_err());
}

#[test]
fn corpus_stats_match_hand_counts() {
    let records = [
        rec("a", "Dogs run"),
        rec("b", "A dog runs fast today"),
        rec("c", "Children and a child"),
    ];
    let s = compute_corpus_stats(&records).unwrap();
    assert_eq!(s.sample_count, 3);
    assert_eq!(s.total_tokens, 11);
    let mean = 11.0 / 3.0;
    let sd = (([2.0f64, 5.0, 4.0]
        .iter()
        .map(|l| (l - mean).powi(2))
        .sum::<f64>())
        / 3.0)
        .sqrt();
    assert!((s.mean_caption_length - mean).abs() < 1e-12);
    assert!((s.stddev_caption_length - sd).abs() < 1e-12);
    // dog/dogs, run/runs and child/children fold together
    assert_eq!(s.unique_tokens, 7);
    assert_eq!(
        compute_corpus_stats(&[]).unwrap_err().code(),
        "empty_corpus"
    );
}

#[test]
fn categories_map_to_nearest_label() {
    let mut a = rec("a", "x");
    a.article_category_raw = "Sports".into();
    let mut b = rec("b", "y");
    b.article_category_raw = "zzzz qqqq".into();
    let tax = vec!["politics".to_string(), "sports".to_string()];
    let out = cluster_categories(vec![a, b], &tax, Some(&TrigramSimilarity), 0.5).unwrap();
    assert_eq!(out[0].article_category_unified.as_deref(), Some("sports"));
    assert!(out[0].passed(RULE_CATEGORY));
    assert_eq!(out[1].article_category_unified, None);
    assert!(!out[1].passed(RULE_CATEGORY));
    assert!(cluster_categories(vec![], &[], Some(&TrigramSimilarity), 0.5).is_err());
}

#[test]
fn splits_are_seeded_and_refuse_reassignment() {
    let records: Vec<_> = (0..50)
        .map(|i| rec(&format!("r{i}"), "some caption"))
        .collect();
    let a = assign_splits(records.clone(), (0.9, 0.05, 0.05), 3).unwrap();
    let b = assign_splits(records.clone(), (0.9, 0.05, 0.05), 3).unwrap();
    let c = assign_splits(records.clone(), (0.9, 0.05, 0.05), 4).unwrap();
    let splits = |v: &[CaptionRecord]| v.iter().map(|r| r.split).collect::<Vec<_>>();
    assert_eq!(splits(&a), splits(&b));
    assert_ne!(splits(&a), splits(&c));
    assert_eq!(
        assign_splits(a, (0.9, 0.05, 0.05), 3).unwrap_err().code(),
        "split_reassignment"
    );
    assert!(assign_splits(records, (0.5, 0.4, 0.2), 3).is_err());
}

proptest! {
    #[test]
    fn min_words_matches_whitespace_count(words in prop::collection::vec("[A-Za-z]{1,6}", 1..15), min in 1usize..12) {
        let caption = words.join("  ");
        let (r, pass) = filter_caption(rec("p", &caption), min, &BTreeSet::new()).unwrap();
        prop_assert_eq!(r.token_count, words.len());
        prop_assert_eq!(pass, words.len() >= min);
    }

    #[test]
    fn split_sizes_are_exact_and_near_ideal(n in 0usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (a, b) = (a, (1.0 - a) * b);
        let ratios = (a, b, 1.0 - a - b);
        let sizes = split_sizes(n, ratios);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (s, r) in sizes.iter().zip([ratios.0, ratios.1, ratios.2]) {
            prop_assert!((*s as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn assigned_splits_partition_with_planned_sizes(n in 0usize..300, seed in any::<u64>()) {
        let records: Vec<_> = (0..n).map(|i| rec(&format!("r{i}"), "c")).collect();
        let out = assign_splits(records, (0.9, 0.05, 0.05), seed).unwrap();
        let count = |s| out.iter().filter(|r| r.split == s).count();
        prop_assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], split_sizes(n, (0.9, 0.05, 0.05)));
    }
}
