use serde::{Deserialize, Serialize};

use crate::text;

/// A named-entity mention inside a caption. `span` is a half-open range of
/// char indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub label: String,
    pub span: (usize, usize),
}

impl EntityMention {
    pub fn new(surface: impl Into<String>, label: impl Into<String>, span: (usize, usize)) -> Self {
        EntityMention {
            surface: surface.into(),
            label: label.into(),
            span,
        }
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.span.0 < other.span.1 && other.span.0 < self.span.1
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown split {other:?}"
            ))),
        }
    }
}

/// Outcome of one named rule applied to a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub rule: String,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Verdict {
    pub fn new(rule: impl Into<String>, pass: bool) -> Self {
        Verdict {
            rule: rule.into(),
            pass,
            detail: None,
        }
    }

    pub fn with_detail(rule: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            rule: rule.into(),
            pass,
            detail: Some(detail.into()),
        }
    }
}

/// One news caption with its annotations, filter verdicts and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    #[serde(default)]
    pub source: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default)]
    pub article_category_raw: String,
    #[serde(default)]
    pub article_category_unified: Option<String>,
    /// Ground-truth annotations shipped with the source corpus, when it has them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provided_entities: Option<Vec<EntityMention>>,
    #[serde(default)]
    pub entity_mentions: Vec<EntityMention>,
    #[serde(default)]
    pub token_count: usize,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub filter_verdicts: Vec<Verdict>,
}

impl CaptionRecord {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        caption: impl Into<String>,
    ) -> Self {
        let caption = caption.into();
        CaptionRecord {
            id: id.into(),
            source: source.into(),
            token_count: text::word_count(&caption),
            caption,
            image_path: None,
            article_category_raw: String::new(),
            article_category_unified: None,
            provided_entities: None,
            entity_mentions: Vec::new(),
            split: Split::Unassigned,
            filter_verdicts: Vec::new(),
        }
    }

    /// Records `verdict`, replacing an earlier verdict for the same rule.
    pub fn set_verdict(&mut self, verdict: Verdict) {
        if let Some(slot) = self
            .filter_verdicts
            .iter_mut()
            .find(|v| v.rule == verdict.rule)
        {
            *slot = verdict;
        } else {
            self.filter_verdicts.push(verdict);
        }
    }

    pub fn verdict(&self, rule: &str) -> Option<&Verdict> {
        self.filter_verdicts.iter().find(|v| v.rule == rule)
    }

    /// True when the named rule has run and passed.
    pub fn passed(&self, rule: &str) -> bool {
        self.verdict(rule).is_some_and(|v| v.pass)
    }

    /// Spans inside the caption and pairwise disjoint.
    pub fn mentions_well_formed(&self) -> bool {
        let len = text::char_len(&self.caption);
        let in_bounds = self
            .entity_mentions
            .iter()
            .all(|m| m.span.0 < m.span.1 && m.span.1 <= len);
        let disjoint = self
            .entity_mentions
            .iter()
            .enumerate()
            .all(|(i, a)| self.entity_mentions[i + 1..].iter().all(|b| !a.overlaps(b)));
        in_bounds && disjoint
    }
}
