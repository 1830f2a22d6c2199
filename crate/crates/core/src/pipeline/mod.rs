//! Staged pipeline over one work directory.
//!
//! Every stage reads and extends the shared line-delimited manifest and
//! writes its artifacts under the work directory. A ledger records, per
//! completed stage, a hash of everything the stage consumed (its config keys,
//! external files and upstream outputs) and of what it produced. A stage is
//! skipped when its input hash is unchanged and its outputs are intact; when a
//! rerun changes a stage's output, every later stage is invalidated.
//!
//! Layout:
//!
//! ```text
//! manifest.jsonl  ledger.jsonl  corpus_stats.json
//! images/<id>.png                 standardized crops
//! entities/<entity>/...           reference profiles
//! entity_images/<id>.png          face-aware crops
//! entity_subset.json
//! subjects.jsonl  rewrites.jsonl
//! embeddings/                     base embeddings plus key-token index
//! checkpoints/dfe.safetensors     adapter checkpoint and train summary
//! generated/{non_entity,entity}/  images plus generation.jsonl
//! report.jsonl  report_entity.jsonl  report.md
//! ```

mod ledger;
mod manifest;
mod stages;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ledger::{hash_path, Hasher, Ledger, LedgerEntry};
pub use manifest::{
    read_manifest, stage_rules, write_manifest, ConditionColumn, EntityColumn, ManifestRow,
    SubjectColumn, RULE_ENTITY_VERIFIED, RULE_FACE_FREE, RULE_IMAGE_AVAILABLE, RULE_IMAGE_QUALITY,
};

use crate::config::PipelineConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Curate,
    Ground,
    Subjects,
    Condition,
    Train,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Curate,
        Stage::Ground,
        Stage::Subjects,
        Stage::Condition,
        Stage::Train,
        Stage::Generate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Curate => "curate",
            Stage::Ground => "ground",
            Stage::Subjects => "subjects",
            Stage::Condition => "condition",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages that must have completed first. Generation also picks up the
    /// training output when there is one, but does not require it.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Curate => &[Stage::Ingest],
            Stage::Ground => &[Stage::Curate],
            Stage::Subjects => &[Stage::Ground],
            Stage::Condition => &[Stage::Subjects],
            Stage::Train => &[Stage::Condition],
            Stage::Generate => &[Stage::Condition],
            Stage::Evaluate => &[Stage::Generate],
        }
    }

    /// Every transitive prerequisite, in pipeline order.
    pub fn all_prerequisites(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        let mut stack: Vec<Stage> = self.prerequisites().to_vec();
        while let Some(s) = stack.pop() {
            if !out.contains(&s) {
                out.push(s);
                stack.extend_from_slice(s.prerequisites());
            }
        }
        out.sort();
        out
    }

    /// Config key prefixes whose values feed the stage.
    fn config_keys(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[
                "paths.corpus",
                "paths.ner_gazetteer",
                "ingest.",
                "models.ner",
                "models.similarity",
            ],
            Stage::Curate => &[
                "paths.image_root",
                "curate.",
                "models.iqa",
                "models.detector",
            ],
            Stage::Ground => &[
                "paths.kb_snapshot",
                "ground.",
                "curate.resolution",
                "curate.split",
                "curate.seed",
                "models.detector",
                "models.recognizer",
            ],
            Stage::Subjects => &[
                "paths.llm_recorded",
                "models.llm",
                "llm.family",
                "llm.rewrite",
                "llm.endpoint",
                "generate.split",
            ],
            Stage::Condition => &["models.text_encoder", "condition."],
            Stage::Train => &[
                "train.",
                "condition.renormalize",
                "models.text_encoder",
                "models.backbone",
                "models.autoencoder",
                "models.reward",
            ],
            Stage::Generate => &[
                "generate.",
                "models.text_encoder",
                "models.backbone",
                "models.autoencoder",
            ],
            Stage::Evaluate => &[
                "eval.",
                "generate.seeds",
                "generate.split",
                "models.reward",
                "models.preference",
                "models.features",
                "models.detector",
                "models.recognizer",
            ],
        }
    }

    /// Work-directory paths holding the stage's artifacts.
    fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["corpus_stats.json"],
            Stage::Curate => &["images"],
            Stage::Ground => &["entities", "entity_images", "entity_subset.json"],
            Stage::Subjects => &["subjects.jsonl", "rewrites.jsonl"],
            Stage::Condition => &["embeddings"],
            Stage::Train => &["checkpoints"],
            Stage::Generate => &["generated"],
            Stage::Evaluate => &["report.jsonl", "report_entity.jsonl", "report.md"],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-dfe" => Ok(Stage::Train),
            _ => Stage::ALL
                .into_iter()
                .find(|st| st.name() == s)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}"))),
        }
    }
}

/// Paths inside the work directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

pub const SUBSET_NON_ENTITY: &str = "non_entity";
pub const SUBSET_ENTITY: &str = "entity";

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }

    pub fn corpus_stats(&self) -> PathBuf {
        self.root.join("corpus_stats.json")
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn entity_images(&self) -> PathBuf {
        self.root.join("entity_images")
    }

    pub fn entity_subset(&self) -> PathBuf {
        self.root.join("entity_subset.json")
    }

    pub fn subjects(&self) -> PathBuf {
        self.root.join("subjects.jsonl")
    }

    pub fn rewrites(&self) -> PathBuf {
        self.root.join("rewrites.jsonl")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("dfe.safetensors")
    }

    pub fn train_summary(&self) -> PathBuf {
        self.root.join("checkpoints").join("train_summary.json")
    }

    pub fn generated(&self, subset: &str) -> PathBuf {
        self.root.join("generated").join(subset)
    }

    pub fn report(&self, subset: &str) -> PathBuf {
        match subset {
            SUBSET_ENTITY => self.root.join("report_entity.jsonl"),
            _ => self.root.join("report.jsonl"),
        }
    }

    pub fn report_table(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn artifacts_hash(&self, stage: Stage) -> Result<String> {
        let mut h = Hasher::default();
        for rel in stage.artifacts() {
            h.part(rel, hash_path(&self.root.join(rel))?);
        }
        Ok(h.finish())
    }
}

/// File-system name for a record id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_alphanumeric() || matches!(c, '_' | '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    /// Later stages whose ledger entries were dropped.
    pub invalidated: Vec<Stage>,
    pub summary: serde_json::Value,
}

/// Config, work directory and ledger shared by the stage runs.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub workspace: Workspace,
    pub ledger: Ledger,
}

fn columns_hash(rows: &[ManifestRow], stage: Stage) -> Result<String> {
    let mut h = Hasher::default();
    for row in rows {
        h.part("row", serde_json::to_vec(&row.projection(stage))?);
    }
    Ok(h.finish())
}

impl Pipeline {
    pub fn open(config: PipelineConfig) -> Result<Self> {
        let workspace = Workspace::new(config.paths.workdir.clone());
        std::fs::create_dir_all(&workspace.root)?;
        let ledger = Ledger::load(&workspace.ledger())?;
        Ok(Pipeline {
            config,
            workspace,
            ledger,
        })
    }

    /// Earliest transitive prerequisite of `stage` that has not completed.
    pub fn missing_prerequisite(&self, stage: Stage) -> Option<Stage> {
        stage
            .all_prerequisites()
            .into_iter()
            .find(|s| self.ledger.get(*s).is_none())
    }

    /// Hash of everything `stage` consumes.
    pub fn input_hash(&self, stage: Stage) -> Result<String> {
        let cfg = &self.config;
        let mut h = Hasher::default();
        h.part("stage", stage.name());
        for key in crate::config::KEYS
            .iter()
            .filter(|k| stage.config_keys().iter().any(|p| k.starts_with(p)))
        {
            h.part(key, cfg.get(key).unwrap_or_default());
        }
        let mut upstream: Vec<Stage> = stage.prerequisites().to_vec();
        if stage == Stage::Generate
            && self.ledger.get(Stage::Train).is_some()
            && cfg.generate.checkpoint.is_none()
        {
            upstream.push(Stage::Train);
        }
        for s in upstream {
            if let Some(e) = self.ledger.get(s) {
                h.part(s.name(), format!("{}:{}", e.input_hash, e.output_hash));
            }
        }
        for (label, path) in stages::external_inputs(self, stage)? {
            h.part(&label, hash_path(&path)?);
        }
        Ok(h.finish())
    }

    fn load_rows(&self) -> Result<Vec<ManifestRow>> {
        let path = self.workspace.manifest();
        if path.exists() {
            read_manifest(&path)
        } else {
            Ok(Vec::new())
        }
    }

    /// True when the ledger entry still matches the inputs, artifacts and
    /// manifest columns.
    pub fn is_current(&self, stage: Stage) -> Result<bool> {
        let Some(entry) = self.ledger.get(stage) else {
            return Ok(false);
        };
        if entry.input_hash != self.input_hash(stage)?
            || entry.artifacts_hash != self.workspace.artifacts_hash(stage)?
        {
            return Ok(false);
        }
        Ok(columns_hash(&self.load_rows()?, stage)? == entry.columns_hash)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageReport> {
        if let Some(missing) = self.missing_prerequisite(stage) {
            return Err(Error::MissingPrerequisite {
                stage: stage.name().into(),
                missing: missing.name().into(),
            });
        }
        for s in stage.all_prerequisites() {
            if !self.is_current(s)? {
                log::warn!("{stage}: prerequisite {s} is out of date; rerun it to refresh downstream results");
            }
        }
        if self.is_current(stage)? {
            log::info!("{stage}: inputs unchanged, skipping");
            let summary = self
                .ledger
                .get(stage)
                .map(|e| e.summary.clone())
                .unwrap_or_default();
            return Ok(StageReport {
                stage,
                skipped: true,
                invalidated: Vec::new(),
                summary,
            });
        }
        let input_hash = self.input_hash(stage)?;
        let mut rows = self.load_rows()?;
        log::info!("{stage}: running over {} manifest rows", rows.len());
        let summary = stages::run(self, stage, &mut rows)?;

        let columns = columns_hash(&rows, stage)?;
        let artifacts = self.workspace.artifacts_hash(stage)?;
        let mut h = Hasher::default();
        h.part("columns", &columns).part("artifacts", &artifacts);
        let output_hash = h.finish();

        let changed = self
            .ledger
            .get(stage)
            .is_none_or(|e| e.output_hash != output_hash);
        let invalidated = if changed {
            self.ledger.invalidate_after(stage)
        } else {
            Vec::new()
        };
        if changed {
            for row in &mut rows {
                for later in Stage::ALL.into_iter().filter(|s| *s > stage) {
                    row.clear(later);
                }
            }
        }
        let bytes = manifest::manifest_bytes(&rows)?;
        manifest::write_atomic(&self.workspace.manifest(), &bytes)?;
        self.ledger.put(LedgerEntry {
            stage,
            input_hash,
            output_hash,
            columns_hash: columns,
            artifacts_hash: artifacts,
            manifest_sha256: crate::text::sha256_hex(&bytes),
            summary: summary.clone(),
        });
        self.ledger.save(&self.workspace.ledger())?;
        if !invalidated.is_empty() {
            log::info!("{stage}: output changed, invalidated {invalidated:?}");
        }
        Ok(StageReport {
            stage,
            skipped: false,
            invalidated,
            summary,
        })
    }

    /// Runs `stages` in pipeline order. Dependencies are checked against the
    /// ledger before anything runs.
    pub fn run(&mut self, stages: &[Stage]) -> Result<Vec<StageReport>> {
        let mut order = stages.to_vec();
        order.sort();
        order.dedup();
        for (i, s) in order.iter().enumerate() {
            if let Some(missing) = s
                .all_prerequisites()
                .into_iter()
                .find(|p| !order[..i].contains(p) && self.ledger.get(*p).is_none())
            {
                return Err(Error::MissingPrerequisite {
                    stage: s.name().into(),
                    missing: missing.name().into(),
                });
            }
        }
        order.into_iter().map(|s| self.run_stage(s)).collect()
    }
}

/// Resolves a record's image path against `paths.image_root`, falling back to
/// the corpus file's directory.
pub fn resolve_image(config: &PipelineConfig, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match (&config.paths.image_root, &config.paths.corpus) {
        (Some(root), _) => root.join(p),
        (None, Some(corpus)) => corpus.parent().unwrap_or(Path::new("")).join(p),
        (None, None) => p.to_path_buf(),
    }
}
