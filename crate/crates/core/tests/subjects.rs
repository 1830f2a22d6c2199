use std::sync::atomic::{AtomicU32, Ordering};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use safe_core::conditioning::subject_conditioning;
use safe_core::subjects::{
    align_phrases_to_tokens, annotate, detokenize_span, parse_rewrite, read_sidecar, write_sidecar,
    ChatRequest, LlmClient, LlmFamily, PromptTemplate, RecordedLlmClient, ResponseCache,
    RetryPolicy, SubjectExtractor,
};
use safe_core::zoo::{registry, WordTokenizer};

#[derive(Deserialize)]
struct Golden {
    id: String,
    caption: String,
    family: String,
    response: String,
    main_subject: Option<String>,
    additional_subjects: Vec<String>,
    fallback_used: bool,
}

fn golden() -> Vec<Golden> {
    include_str!("data/subjects_golden.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn golden_responses_parse_to_gold() {
    let cases = golden();
    assert_eq!(cases.len(), 30);
    for g in cases {
        let a = annotate(
            &g.id,
            &g.caption,
            &g.response,
            "recorded",
            g.family.parse().unwrap(),
        );
        assert_eq!(a.main_subject, g.main_subject, "{}: {:?}", g.id, g.response);
        assert_eq!(a.additional_subjects, g.additional_subjects, "{}", g.id);
        assert_eq!(a.fallback_used, g.fallback_used, "{}", g.id);
        assert_eq!(a.raw_response, g.response);
    }
}

/// Byte soup biased toward the characters the parsers care about.
fn fuzz_bytes(rng: &mut ChaCha8Rng) -> Vec<u8> {
    const ALPHABET: &[u8] = b"{}[]\"':,.-*1) \n\tmain_topic_wordadditional";
    let n = rng.random_range(0..200);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.6) {
                ALPHABET[rng.random_range(0..ALPHABET.len())]
            } else {
                rng.random()
            }
        })
        .collect()
}

#[test]
fn fuzzed_responses_never_crash_and_stay_valid() {
    let caption = "Firefighters battle a blaze at a warehouse near the river";
    let enc = registry::text_encoder(registry::TEXT_ENCODER).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let raw = String::from_utf8_lossy(&fuzz_bytes(&mut rng)).into_owned();
        for family in [LlmFamily::StructuredJson, LlmFamily::ListStyle] {
            let a = annotate("f", caption, &raw, "fuzz", family);
            if a.fallback_used {
                assert!(a.main_subject.is_none() && a.additional_subjects.is_empty());
                let (_, w) = subject_conditioning(caption, Some(&a), &enc, 1.21).unwrap();
                assert!(w.is_identity());
            } else {
                let lower = caption.to_lowercase();
                for p in a.phrases() {
                    let norm = p
                        .split_whitespace()
                        .collect::<Vec<_>>()
                        .join(" ")
                        .to_lowercase();
                    assert!(lower.contains(&norm), "{p:?} not in caption");
                }
            }
        }
    }
}

#[test]
fn alignment_covers_every_occurrence() {
    let tok = WordTokenizer::default();
    let caption = "The river rises as the River Road floods near the river bank";
    let al = align_phrases_to_tokens(caption, &["river".into(), "bridge".into()], &tok);
    assert_eq!(al.spans.len(), 3);
    assert_eq!(al.dropped.len(), 1);
    for (_, span) in &al.spans {
        assert_eq!(
            detokenize_span(caption, &tok, *span).to_lowercase(),
            "river"
        );
    }
    let multi = align_phrases_to_tokens(caption, &["river bank".into()], &tok);
    let (_, span) = multi.spans[0];
    assert_eq!(span.1 - span.0, 1);
    assert_eq!(detokenize_span(caption, &tok, span), "river bank");
}

struct Flaky {
    inner: RecordedLlmClient,
    failures: u32,
    calls: AtomicU32,
}

impl LlmClient for Flaky {
    fn id(&self) -> &str {
        "flaky"
    }

    fn send(&self, request: &ChatRequest) -> Result<String, String> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
            return Err("connection reset".into());
        }
        self.inner.send(request)
    }
}

#[test]
fn extractor_retries_caches_and_keeps_order() {
    let template = PromptTemplate::for_family(LlmFamily::StructuredJson);
    let mut inner = RecordedLlmClient::new("rec");
    let captions: Vec<(String, String)> = (0..6)
        .map(|i| {
            (
                format!("r{i}"),
                format!("Crowds gather at square number {i} for the parade"),
            )
        })
        .collect();
    for (_, c) in &captions {
        inner.insert(
            template.render(c),
            r#"{"main_topic_word": "Crowds", "additional_topic_words": ["parade"]}"#,
        );
    }
    let client = Flaky {
        inner,
        failures: 2,
        calls: AtomicU32::new(0),
    };
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::new(dir.path());
    let ex = SubjectExtractor {
        client: &client,
        retry: RetryPolicy::immediate(3),
        cache: Some(&cache),
    };
    let out = ex.extract_batch(&captions, &template, 3);
    for ((id, _), a) in captions.iter().zip(&out) {
        let a = a.as_ref().unwrap();
        assert_eq!(&a.record_id, id);
        assert_eq!(a.main_subject.as_deref(), Some("Crowds"));
    }
    let calls = client.calls.load(Ordering::SeqCst);
    // a second pass is served from the cache
    let again = ex.extract_batch(&captions, &template, 2);
    assert_eq!(client.calls.load(Ordering::SeqCst), calls);
    assert_eq!(
        again.into_iter().map(|r| r.unwrap()).collect::<Vec<_>>(),
        out.into_iter().map(|r| r.unwrap()).collect::<Vec<_>>()
    );

    let dead = Flaky {
        inner: RecordedLlmClient::new("x"),
        failures: u32::MAX,
        calls: AtomicU32::new(0),
    };
    let ex = SubjectExtractor {
        client: &dead,
        retry: RetryPolicy::immediate(3),
        cache: None,
    };
    let err = ex.extract("r", "Crowds gather", &template).unwrap_err();
    assert_eq!(err.code(), "llm_unreachable");
    assert_eq!(dead.calls.load(Ordering::SeqCst), 3);
    assert_eq!(
        ex.extract("r", "  ", &template).unwrap_err().code(),
        "empty_caption"
    );
}

#[test]
fn sidecar_roundtrip_and_rewrite_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let anns: Vec<_> = golden()
        .iter()
        .map(|g| {
            annotate(
                &g.id,
                &g.caption,
                &g.response,
                "recorded",
                g.family.parse().unwrap(),
            )
        })
        .collect();
    let path = dir.path().join("subjects.jsonl");
    write_sidecar(&path, &anns).unwrap();
    let back = read_sidecar(&path).unwrap();
    assert_eq!(back.len(), 30);
    for a in &anns {
        assert_eq!(&back[&a.record_id], a);
    }

    let caption = "Firefighters battle a blaze";
    assert_eq!(
        parse_rewrite(
            caption,
            "Sure!\nGenerate an image of firefighters fighting a fire."
        ),
        "Generate an image of firefighters fighting a fire."
    );
    assert!(parse_rewrite(caption, "").starts_with("Generate an image"));
    assert!(parse_rewrite(caption, "").contains(caption));
}

#[test]
fn templates_carry_the_caption_once() {
    for family in [LlmFamily::StructuredJson, LlmFamily::ListStyle] {
        let t = PromptTemplate::for_family(family);
        let r = t.render("a {weird} <caption>");
        assert_eq!(r.matches("a {weird} <caption>").count(), 1);
    }
    let hash = |f| PromptTemplate::for_family(f).hash();
    assert_ne!(hash(LlmFamily::StructuredJson), hash(LlmFamily::ListStyle));
    assert!(PromptTemplate::new("s", "no placeholder", LlmFamily::ListStyle).is_err());
}

proptest! {
    #[test]
    fn parsers_are_total(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let raw = String::from_utf8_lossy(&bytes);
        for family in [LlmFamily::StructuredJson, LlmFamily::ListStyle] {
            let a = annotate("p", "Crowds gather in the square", &raw, "p", family);
            prop_assert_eq!(a.fallback_used, a.phrases().is_empty());
        }
    }

    #[test]
    fn annotate_keeps_only_caption_phrases(words in prop::collection::vec("[a-z]{1,8}", 1..8), pick in 0usize..8) {
        let caption = words.join(" ");
        let chosen = &words[pick % words.len()];
        let raw = format!(r#"{{"main_topic_word": "{chosen}", "additional_topic_words": ["zzzzzzzzzq"]}}"#);
        let a = annotate("p", &caption, &raw, "p", LlmFamily::StructuredJson);
        prop_assert_eq!(a.main_subject.as_deref(), Some(chosen.as_str()));
        prop_assert!(a.additional_subjects.is_empty());
        prop_assert_eq!(a.discarded.len(), 1);
    }
}
