//! Named-entity recognition behind a pluggable handle.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::record::EntityMention;
use crate::{Error, Result};

pub trait NerBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Mentions found in `text`, spans as char ranges.
    fn recognize(&self, text: &str) -> Result<Vec<EntityMention>>;
}

/// Dictionary recognizer: longest-match lookup of known surface forms at word
/// boundaries, case-sensitive.
#[derive(Debug, Clone, Default)]
pub struct GazetteerNer {
    // first word -> (full phrase as words, label), longest first
    entries: HashMap<String, Vec<(Vec<String>, String)>>,
}

#[derive(Deserialize)]
struct GazetteerLine {
    phrase: String,
    label: String,
}

impl GazetteerNer {
    pub fn new<I, P, L>(entries: I) -> Self
    where
        I: IntoIterator<Item = (P, L)>,
        P: AsRef<str>,
        L: Into<String>,
    {
        let mut g = GazetteerNer::default();
        for (phrase, label) in entries {
            g.insert(phrase.as_ref(), label.into());
        }
        g
    }

    pub fn insert(&mut self, phrase: &str, label: String) {
        let words: Vec<String> = phrase.split_whitespace().map(str::to_string).collect();
        let Some(first) = words.first().cloned() else {
            return;
        };
        let bucket = self.entries.entry(first).or_default();
        bucket.push((words, label));
        bucket.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        bucket.dedup_by(|a, b| a.0 == b.0);
    }

    /// Loads `{"phrase": ..., "label": ...}` lines.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::NerBackendUnavailable(format!("{}: {e}", path.display())))?;
        let mut g = GazetteerNer::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: GazetteerLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            g.insert(&entry.phrase, entry.label);
        }
        Ok(g)
    }

    /// A small general-purpose lexicon of frequently mentioned news entities.
    pub fn news_default() -> Self {
        GazetteerNer::new(DEFAULT_LEXICON.iter().map(|(p, l)| (*p, *l)))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Word pieces of `text` with their char ranges; surrounding punctuation is
/// trimmed from each piece so "Obama's" and "Paris," still match.
fn word_pieces(text: &str) -> Vec<(String, usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let (mut s, mut e) = (start, i);
        while s < e && !chars[s].is_alphanumeric() {
            s += 1;
        }
        while e > s && !chars[e - 1].is_alphanumeric() {
            e -= 1;
        }
        if s == e {
            continue;
        }
        let mut word: String = chars[s..e].iter().collect();
        // possessive
        if let Some(stripped) = word
            .strip_suffix("'s")
            .or_else(|| word.strip_suffix("\u{2019}s"))
        {
            e -= 2;
            word = stripped.to_string();
        }
        if s < e {
            out.push((word, s, e));
        }
    }
    out
}

impl NerBackend for GazetteerNer {
    fn id(&self) -> &str {
        "gazetteer-ner-v1"
    }

    fn recognize(&self, text: &str) -> Result<Vec<EntityMention>> {
        let pieces = word_pieces(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < pieces.len() {
            let matched = self.entries.get(&pieces[i].0).and_then(|cands| {
                cands.iter().find(|(words, _)| {
                    i + words.len() <= pieces.len()
                        && words.iter().zip(&pieces[i..]).all(|(w, p)| *w == p.0)
                })
            });
            match matched {
                Some((words, label)) => {
                    let (s, e) = (pieces[i].1, pieces[i + words.len() - 1].2);
                    let surface: String = text.chars().skip(s).take(e - s).collect();
                    out.push(EntityMention::new(surface, label.clone(), (s, e)));
                    i += words.len();
                }
                None => i += 1,
            }
        }
        Ok(out)
    }
}

/// Recognizer that always reports itself unavailable.
#[derive(Debug, Clone, Default)]
pub struct UnavailableNer;

impl NerBackend for UnavailableNer {
    fn id(&self) -> &str {
        "unavailable"
    }

    fn recognize(&self, _text: &str) -> Result<Vec<EntityMention>> {
        Err(Error::NerBackendUnavailable(
            "no recognizer configured".into(),
        ))
    }
}

const DEFAULT_LEXICON: &[(&str, &str)] = &[
    ("Obama", "PERSON"),
    ("Barack Obama", "PERSON"),
    ("Michelle Obama", "PERSON"),
    ("Donald Trump", "PERSON"),
    ("Trump", "PERSON"),
    ("Hillary Clinton", "PERSON"),
    ("Clinton", "PERSON"),
    ("Joe Biden", "PERSON"),
    ("Biden", "PERSON"),
    ("Angela Merkel", "PERSON"),
    ("Merkel", "PERSON"),
    ("Vladimir Putin", "PERSON"),
    ("Putin", "PERSON"),
    ("David Beckham", "PERSON"),
    ("Beckham", "PERSON"),
    ("Serena Williams", "PERSON"),
    ("Roger Federer", "PERSON"),
    ("Pope Francis", "PERSON"),
    ("Taylor Swift", "PERSON"),
    ("Elon Musk", "PERSON"),
    ("New York", "GPE"),
    ("New York City", "GPE"),
    ("London", "GPE"),
    ("Paris", "GPE"),
    ("Washington", "GPE"),
    ("Beijing", "GPE"),
    ("Moscow", "GPE"),
    ("Tokyo", "GPE"),
    ("California", "GPE"),
    ("Texas", "GPE"),
    ("China", "GPE"),
    ("Russia", "GPE"),
    ("Germany", "GPE"),
    ("France", "GPE"),
    ("Britain", "GPE"),
    ("Syria", "GPE"),
    ("Iraq", "GPE"),
    ("United States", "GPE"),
    ("Europe", "LOC"),
    ("Africa", "LOC"),
    ("Asia", "LOC"),
    ("Middle East", "LOC"),
    ("Atlantic", "LOC"),
    ("Pacific", "LOC"),
    ("Mediterranean", "LOC"),
    ("Himalayas", "LOC"),
    ("White House", "ORG"),
    ("Congress", "ORG"),
    ("Senate", "ORG"),
    ("United Nations", "ORG"),
    ("NATO", "ORG"),
    ("Google", "ORG"),
    ("Apple", "ORG"),
    ("Samsung", "ORG"),
    ("Microsoft", "ORG"),
    ("Pentagon", "ORG"),
    ("European Union", "ORG"),
    ("Supreme Court", "ORG"),
    ("Medal of Honor", "WORK_OF_ART"),
    ("Mona Lisa", "WORK_OF_ART"),
    ("Hamlet", "WORK_OF_ART"),
    ("Monday", "DATE"),
    ("Tuesday", "DATE"),
    ("Wednesday", "DATE"),
    ("Thursday", "DATE"),
    ("Friday", "DATE"),
    ("Saturday", "DATE"),
    ("Sunday", "DATE"),
];
