//! Caption ingest: filtering, entity tagging, corpus statistics, category
//! clustering and split assignment.

mod ner;
mod record;
mod similarity;

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ner::{GazetteerNer, NerBackend, UnavailableNer};
pub use record::{CaptionRecord, EntityMention, Split, Verdict};
pub use similarity::{SentenceSimilarity, TrigramSimilarity};

use crate::text;
use crate::{Error, Result};

pub const RULE_UNTOKENIZABLE: &str = "untokenizable";
pub const RULE_MIN_WORDS: &str = "min_words";
pub const RULE_EXCLUDED_ENTITIES: &str = "excluded_entities";
pub const RULE_CATEGORY: &str = "category_cluster";

pub const DEFAULT_MIN_WORDS: usize = 6;
pub const DEFAULT_EXCLUDED_TYPES: [&str; 5] = ["PERSON", "GPE", "LOC", "WORK_OF_ART", "ORG"];
pub const DEFAULT_CATEGORY_SIMILARITY: f64 = 0.5;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.9, 0.05, 0.05);

pub fn default_excluded_types() -> BTreeSet<String> {
    DEFAULT_EXCLUDED_TYPES
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Applies the length rule and, when `excluded_entity_types` is non-empty, the
/// entity-type exclusion rule. Returns the record with its verdicts updated and
/// whether every rule passed.
pub fn filter_caption(
    mut record: CaptionRecord,
    min_words: usize,
    excluded_entity_types: &BTreeSet<String>,
) -> Result<(CaptionRecord, bool)> {
    if min_words == 0 {
        return Err(Error::InvalidArgument(
            "min_words must be at least 1".into(),
        ));
    }
    if record.caption.trim().is_empty() {
        return Err(Error::EmptyCaption);
    }
    if text::is_malformed(&record.caption) {
        record.token_count = 0;
        record.set_verdict(Verdict::new(RULE_UNTOKENIZABLE, false));
        return Ok((record, false));
    }
    record.token_count = text::word_count(&record.caption);
    let long_enough = record.token_count >= min_words;
    record.set_verdict(Verdict::with_detail(
        RULE_MIN_WORDS,
        long_enough,
        format!("{} words, minimum {min_words}", record.token_count),
    ));
    let mut pass = long_enough;
    if !excluded_entity_types.is_empty() {
        let hits: Vec<&str> = record
            .entity_mentions
            .iter()
            .filter(|m| excluded_entity_types.contains(&m.label))
            .map(|m| m.label.as_str())
            .collect();
        let clean = hits.is_empty();
        let verdict = if clean {
            Verdict::new(RULE_EXCLUDED_ENTITIES, true)
        } else {
            Verdict::with_detail(RULE_EXCLUDED_ENTITIES, false, hits.join(","))
        };
        record.set_verdict(verdict);
        pass &= clean;
    }
    Ok((record, pass))
}

/// Populates `entity_mentions`. Source-provided annotations win over the
/// recognizer, which is only consulted when none are present.
pub fn tag_entities(
    mut record: CaptionRecord,
    ner: Option<&dyn NerBackend>,
) -> Result<CaptionRecord> {
    if record.caption.trim().is_empty() {
        return Err(Error::EmptyCaption);
    }
    let mut mentions = match &record.provided_entities {
        Some(provided) => provided.clone(),
        None => {
            let ner =
                ner.ok_or_else(|| Error::NerBackendUnavailable("no recognizer handle".into()))?;
            ner.recognize(&record.caption)?
        }
    };
    let len = text::char_len(&record.caption);
    mentions.retain(|m| m.span.0 < m.span.1 && m.span.1 <= len);
    mentions.sort_by_key(|m| (m.span.0, std::cmp::Reverse(m.span.1)));
    let mut kept: Vec<EntityMention> = Vec::with_capacity(mentions.len());
    for m in mentions {
        if kept.last().is_none_or(|last| !last.overlaps(&m)) {
            kept.push(m);
        }
    }
    record.entity_mentions = kept;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub unique_tokens: usize,
    pub total_tokens: usize,
    pub mean_caption_length: f64,
    pub stddev_caption_length: f64,
    pub sample_count: usize,
}

/// Unique lemmas (case-folded) and caption-length moments. The standard
/// deviation is the population one.
pub fn compute_corpus_stats(records: &[CaptionRecord]) -> Result<CorpusStats> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut vocab = HashSet::new();
    let mut lengths = Vec::with_capacity(records.len());
    for r in records {
        let words = text::word_tokens(&r.caption);
        lengths.push(words.len() as f64);
        vocab.extend(words.iter().map(|w| text::lemmatize(w)));
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let var = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok(CorpusStats {
        unique_tokens: vocab.len(),
        total_tokens: lengths.iter().sum::<f64>() as usize,
        mean_caption_length: mean,
        stddev_caption_length: var.sqrt(),
        sample_count: records.len(),
    })
}

/// Maps each record's raw category onto the closest taxonomy label, or leaves
/// it unlabeled below `min_similarity`. Ties go to the earlier label.
pub fn cluster_categories(
    mut records: Vec<CaptionRecord>,
    taxonomy: &[String],
    model: Option<&dyn SentenceSimilarity>,
    min_similarity: f64,
) -> Result<Vec<CaptionRecord>> {
    if taxonomy.is_empty() {
        return Err(Error::InvalidArgument("taxonomy is empty".into()));
    }
    if !(min_similarity > 0.0 && min_similarity <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "min_similarity {min_similarity} outside (0, 1]"
        )));
    }
    let Some(model) = model else {
        for r in &mut records {
            r.article_category_unified = None;
            r.set_verdict(Verdict::with_detail(
                RULE_CATEGORY,
                false,
                "similarity model unavailable",
            ));
        }
        return Ok(records);
    };
    for r in &mut records {
        let mut best: Option<(usize, f64)> = None;
        let mut failure = None;
        for (i, label) in taxonomy.iter().enumerate() {
            match model.similarity(&r.article_category_raw, label) {
                Ok(s) => {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(msg) = failure {
            r.article_category_unified = None;
            r.set_verdict(Verdict::with_detail(RULE_CATEGORY, false, msg));
            continue;
        }
        match best {
            Some((i, s)) if s >= min_similarity => {
                r.article_category_unified = Some(taxonomy[i].clone());
                r.set_verdict(Verdict::new(RULE_CATEGORY, true));
            }
            _ => {
                r.article_category_unified = None;
                r.set_verdict(Verdict::with_detail(
                    RULE_CATEGORY,
                    false,
                    "below similarity threshold",
                ));
            }
        }
    }
    Ok(records)
}

/// Partition sizes by largest remainder: floors first, then the leftover
/// records go to the largest fractional parts (earlier split on ties).
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let ideal: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for i in 0..3 {
        sizes[i] = ideal[i].floor() as usize;
    }
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    sizes
}

/// Seeded shuffle, then contiguous train/val/test blocks.
pub fn assign_splits(
    mut records: Vec<CaptionRecord>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|x| !(0.0..=1.0).contains(x)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {a},{b},{c} must be in [0,1] and sum to 1"
        )));
    }
    if let Some(r) = records.iter().find(|r| r.split != Split::Unassigned) {
        return Err(Error::SplitReassignment(r.id.clone()));
    }
    let sizes = split_sizes(records.len(), ratios);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, idx) in order.into_iter().enumerate() {
        records[idx].split = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(records)
}
