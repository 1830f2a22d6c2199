use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Stage;
use crate::corpus::{
    CaptionRecord, Split, RULE_CATEGORY, RULE_EXCLUDED_ENTITIES, RULE_MIN_WORDS, RULE_UNTOKENIZABLE,
};
use crate::imaging::ImageRecord;
use crate::{Error, Result};

pub const RULE_IMAGE_AVAILABLE: &str = "image_available";
pub const RULE_IMAGE_QUALITY: &str = "image_quality";
pub const RULE_FACE_FREE: &str = "face_free";
pub const RULE_ENTITY_VERIFIED: &str = "entity_verified";

/// Verdict rules written by each stage.
pub fn stage_rules(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Ingest => &[
            RULE_UNTOKENIZABLE,
            RULE_MIN_WORDS,
            RULE_EXCLUDED_ENTITIES,
            RULE_CATEGORY,
        ],
        Stage::Curate => &[RULE_IMAGE_AVAILABLE, RULE_IMAGE_QUALITY, RULE_FACE_FREE],
        Stage::Ground => &[RULE_ENTITY_VERIFIED],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityColumn {
    pub entity_id: String,
    pub surface: String,
    pub similarity: Option<f64>,
    pub present: bool,
    /// Survived the per-entity sample floor.
    pub retained: bool,
    /// Face-aware crop, relative to the work directory.
    pub crop: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectColumn {
    pub main_subject: Option<String>,
    pub additional_subjects: Vec<String>,
    pub fallback_used: bool,
    pub llm_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionColumn {
    pub tokens: usize,
    pub key_indices: Vec<usize>,
    pub beta: f64,
}

/// One line of the shared manifest: the caption record plus the columns each
/// later stage appends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    #[serde(flatten)]
    pub record: CaptionRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRecord>,
    /// Standardized crop, relative to the work directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<String>,
    /// Member of the entity-free subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub non_entity: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<EntityColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjects: Option<SubjectColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<ConditionColumn>,
}

impl ManifestRow {
    pub fn new(record: CaptionRecord) -> Self {
        ManifestRow {
            record,
            image: None,
            crop: None,
            non_entity: None,
            entity: None,
            subjects: None,
            condition: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.record.id
    }

    pub fn in_non_entity(&self) -> bool {
        self.non_entity == Some(true)
    }

    pub fn entity_retained(&self) -> Option<&EntityColumn> {
        self.entity.as_ref().filter(|e| e.retained)
    }

    /// Resets the columns owned by `stage`.
    pub fn clear(&mut self, stage: Stage) {
        let rules = stage_rules(stage);
        self.record
            .filter_verdicts
            .retain(|v| !rules.contains(&v.rule.as_str()));
        match stage {
            Stage::Ingest => {
                self.record.entity_mentions.clear();
                self.record.article_category_unified = None;
            }
            Stage::Curate => {
                self.image = None;
                self.crop = None;
                self.non_entity = None;
                self.record.split = Split::Unassigned;
            }
            Stage::Ground => self.entity = None,
            Stage::Subjects => self.subjects = None,
            Stage::Condition => self.condition = None,
            Stage::Train | Stage::Generate | Stage::Evaluate => {}
        }
    }

    /// Copies every column owned by a stage after `stage` from `other`.
    pub fn adopt_downstream(&mut self, other: &ManifestRow, stage: Stage) {
        let later: Vec<Stage> = Stage::ALL.into_iter().filter(|s| *s > stage).collect();
        for s in &later {
            let rules = stage_rules(*s);
            for v in other
                .record
                .filter_verdicts
                .iter()
                .filter(|v| rules.contains(&v.rule.as_str()))
            {
                self.record.set_verdict(v.clone());
            }
        }
        if later.contains(&Stage::Curate) {
            self.image = other.image.clone();
            self.crop = other.crop.clone();
            self.non_entity = other.non_entity;
            self.record.split = other.record.split;
        }
        if later.contains(&Stage::Ground) {
            self.entity = other.entity.clone();
        }
        if later.contains(&Stage::Subjects) {
            self.subjects = other.subjects.clone();
        }
        if later.contains(&Stage::Condition) {
            self.condition = other.condition.clone();
        }
    }

    /// The part of the row `stage` is responsible for, as JSON.
    pub fn projection(&self, stage: Stage) -> Value {
        let rules = stage_rules(stage);
        let verdicts: Vec<_> = self
            .record
            .filter_verdicts
            .iter()
            .filter(|v| rules.contains(&v.rule.as_str()))
            .cloned()
            .collect();
        match stage {
            Stage::Ingest => {
                let mut r = self.record.clone();
                r.split = Split::Unassigned;
                r.filter_verdicts = verdicts;
                json!(r)
            }
            Stage::Curate => json!({
                "id": self.record.id,
                "image": self.image,
                "crop": self.crop,
                "non_entity": self.non_entity,
                "split": self.record.split,
                "verdicts": verdicts,
            }),
            Stage::Ground => {
                json!({ "id": self.record.id, "entity": self.entity, "verdicts": verdicts })
            }
            Stage::Subjects => json!({ "id": self.record.id, "subjects": self.subjects }),
            Stage::Condition => json!({ "id": self.record.id, "condition": self.condition }),
            Stage::Train | Stage::Generate | Stage::Evaluate => Value::Null,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

pub fn manifest_bytes(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        writeln!(out, "{}", serde_json::to_string(row)?)?;
    }
    Ok(out)
}

/// Writes through a temporary file so readers never see a partial manifest.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    write_atomic(path, &manifest_bytes(rows)?)
}
