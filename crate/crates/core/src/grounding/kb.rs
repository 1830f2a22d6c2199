use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::text::word_tokens;
use crate::{Error, Result};

/// One knowledge-base entry of the local snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntity {
    pub entity_id: String,
    pub display_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default = "person")]
    pub entity_type: String,
    /// Prior used to break ambiguous links, higher wins.
    #[serde(default)]
    pub popularity: f64,
    /// Main image, relative to the snapshot directory.
    #[serde(default)]
    pub reference_image: Option<String>,
}

fn person() -> String {
    "PERSON".to_string()
}

/// Local index keyed by canonical id, read from `entities.jsonl` inside the
/// snapshot directory (or from a `.jsonl` file directly).
#[derive(Debug, Clone)]
pub struct KnowledgeSnapshot {
    pub root: PathBuf,
    pub entities: Vec<KbEntity>,
}

impl KnowledgeSnapshot {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join("entities.jsonl")
        } else {
            path.to_path_buf()
        };
        if !file.is_file() {
            return Err(Error::KbSnapshotMissing(file));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = std::fs::read_to_string(&file)?;
        let mut entities = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entities.push(serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(KnowledgeSnapshot { root, entities })
    }

    pub fn from_entities(root: impl Into<PathBuf>, entities: Vec<KbEntity>) -> Self {
        KnowledgeSnapshot {
            root: root.into(),
            entities,
        }
    }

    pub fn get(&self, entity_id: &str) -> Option<&KbEntity> {
        self.entities.iter().find(|e| e.entity_id == entity_id)
    }

    pub fn reference_image_path(&self, entity: &KbEntity) -> Option<PathBuf> {
        entity.reference_image.as_ref().map(|p| self.root.join(p))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entities {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkCandidate {
    pub entity_id: String,
    pub confidence: f64,
}

pub trait EntityLinker: Send + Sync {
    fn id(&self) -> &str;

    /// Canonical entity for `surface`, or `None` when nothing plausible exists.
    fn link(&self, surface: &str, label: &str, context: &str) -> Result<Option<LinkCandidate>>;
}

/// Alias-table linker: exact name or alias matches score 1; a mention whose
/// words are a subset of a name's words scores by coverage. Ambiguity resolves
/// by context overlap, then popularity, then id.
#[derive(Debug, Clone)]
pub struct AliasLinker {
    snapshot: KnowledgeSnapshot,
}

impl AliasLinker {
    pub fn new(snapshot: KnowledgeSnapshot) -> Self {
        AliasLinker { snapshot }
    }

    pub fn snapshot(&self) -> &KnowledgeSnapshot {
        &self.snapshot
    }
}

fn lower_words(s: &str) -> Vec<String> {
    word_tokens(s)
        .into_iter()
        .map(|w| w.to_lowercase())
        .collect()
}

impl EntityLinker for AliasLinker {
    fn id(&self) -> &str {
        "alias-linker-v1"
    }

    fn link(&self, surface: &str, label: &str, context: &str) -> Result<Option<LinkCandidate>> {
        let mention = lower_words(surface);
        if mention.is_empty() {
            return Ok(None);
        }
        let context_words = lower_words(context);
        let mut best: Option<(f64, usize, f64, &str)> = None;
        for e in &self.snapshot.entities {
            if !label.is_empty() && e.entity_type != label {
                continue;
            }
            let mut score: f64 = 0.0;
            let mut name_words_all: Vec<String> = Vec::new();
            for name in std::iter::once(&e.display_name).chain(&e.aliases) {
                let words = lower_words(name);
                if words == mention {
                    score = 1.0;
                } else if mention.iter().all(|m| words.contains(m)) && !words.is_empty() {
                    score = score.max(0.9 * mention.len() as f64 / words.len() as f64);
                }
                name_words_all.extend(words);
            }
            if score == 0.0 {
                continue;
            }
            let context_hits = name_words_all
                .iter()
                .filter(|w| !mention.contains(w) && context_words.contains(w))
                .count();
            let cand = (score, context_hits, e.popularity, e.entity_id.as_str());
            let better = match &best {
                None => true,
                Some(b) => {
                    cand.0 > b.0
                        || (cand.0 == b.0 && cand.1 > b.1)
                        || (cand.0 == b.0 && cand.1 == b.1 && cand.2 > b.2)
                        || (cand.0 == b.0 && cand.1 == b.1 && cand.2 == b.2 && cand.3 < b.3)
                }
            };
            if better {
                best = Some(cand);
            }
        }
        Ok(best.map(|(score, _, _, id)| LinkCandidate {
            entity_id: id.to_string(),
            confidence: score,
        }))
    }
}
