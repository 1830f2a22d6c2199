//! Flat `key = value` pipeline configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted section paths
//! (`curate.iqa_threshold`). Unknown keys are rejected; every problem is
//! reported with its key path in one aggregated error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::corpus::{
    default_excluded_types, DEFAULT_CATEGORY_SIMILARITY, DEFAULT_MIN_WORDS, DEFAULT_SPLIT,
};
use crate::generation::{GenerationConfig, GenerationMode};
use crate::grounding::{DEFAULT_MIN_SAMPLES, DEFAULT_MIN_SIMILARITY};
use crate::subjects::LlmFamily;
use crate::trainer::{LossMapping, TrainConfig};
use crate::zoo::registry;
use crate::{Error, Result};

pub const ENV_CACHE_DIR: &str = "SAFE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub workdir: PathBuf,
    /// Raw caption manifest (line-delimited records).
    pub corpus: Option<PathBuf>,
    /// Root that relative image paths resolve against.
    pub image_root: Option<PathBuf>,
    pub kb_snapshot: Option<PathBuf>,
    /// Gazetteer for the NER stand-in; the built-in list when absent.
    pub ner_gazetteer: Option<PathBuf>,
    /// Recorded LLM responses, used instead of a live endpoint when set.
    pub llm_recorded: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub text_encoder: String,
    pub backbone: String,
    pub autoencoder: String,
    pub reward: String,
    pub preference: String,
    pub features: String,
    pub iqa: String,
    pub detector: String,
    pub recognizer: String,
    pub ner: String,
    pub similarity: String,
    pub llm: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmSettings {
    pub endpoint: String,
    pub family: LlmFamily,
    pub parallelism: usize,
    pub max_attempts: u32,
    /// Also produce rewritten prompts for the rewrite baseline.
    pub rewrite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSettings {
    pub min_words: usize,
    pub excluded_types: BTreeSet<String>,
    /// Unified category labels; clustering is skipped when empty.
    pub taxonomy: Vec<String>,
    pub min_category_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurateSettings {
    pub resolution: u32,
    pub iqa_threshold: f64,
    pub face_confidence: f64,
    pub split_ratios: (f64, f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundSettings {
    pub min_similarity: f64,
    pub min_samples: usize,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSettings {
    pub scale_exp: i64,
    pub renormalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub face_crop: u32,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub models: Models,
    pub llm: LlmSettings,
    pub ingest: IngestSettings,
    pub curate: CurateSettings,
    pub ground: GroundSettings,
    pub condition: ConditionSettings,
    pub train: TrainConfig,
    /// Stop training after this many steps (`0` = run all epochs).
    pub train_max_steps: u64,
    pub generate: GenerationConfig,
    pub generate_split: crate::corpus::Split,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths {
                workdir: PathBuf::from("work"),
                corpus: None,
                image_root: None,
                kb_snapshot: None,
                ner_gazetteer: None,
                llm_recorded: None,
                cache: None,
            },
            models: Models {
                text_encoder: registry::TEXT_ENCODER.into(),
                backbone: registry::BACKBONE.into(),
                autoencoder: registry::AUTOENCODER.into(),
                reward: registry::REWARD.into(),
                preference: registry::PREFERENCE.into(),
                features: registry::FEATURES.into(),
                iqa: registry::IQA.into(),
                detector: registry::DETECTOR.into(),
                recognizer: registry::RECOGNIZER.into(),
                ner: registry::NER.into(),
                similarity: registry::SIMILARITY.into(),
                llm: "gpt-3.5-turbo".into(),
            },
            llm: LlmSettings {
                endpoint: "https://api.openai.com/v1/chat/completions".into(),
                family: LlmFamily::StructuredJson,
                parallelism: 4,
                max_attempts: 4,
                rewrite: true,
            },
            ingest: IngestSettings {
                min_words: DEFAULT_MIN_WORDS,
                excluded_types: default_excluded_types(),
                taxonomy: Vec::new(),
                min_category_similarity: DEFAULT_CATEGORY_SIMILARITY,
            },
            curate: CurateSettings {
                resolution: 512,
                iqa_threshold: crate::imaging::DEFAULT_IQA_THRESHOLD,
                face_confidence: crate::imaging::DEFAULT_FACE_CONFIDENCE,
                split_ratios: DEFAULT_SPLIT,
                seed: 42,
            },
            ground: GroundSettings {
                min_similarity: DEFAULT_MIN_SIMILARITY,
                min_samples: DEFAULT_MIN_SAMPLES,
                enabled: true,
            },
            condition: ConditionSettings {
                scale_exp: crate::conditioning::DEFAULT_SCALE_EXP,
                renormalize: false,
            },
            train: TrainConfig::default(),
            train_max_steps: 0,
            generate: GenerationConfig::default(),
            generate_split: crate::corpus::Split::Test,
            eval: EvalSettings {
                face_crop: 224,
                label: "SAFE".into(),
            },
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest repr that parses back to the same bits
    format!("{v:?}")
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_items(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

pub fn parse_ratios(v: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| parse_num(p.trim()))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(format!("expected three comma-separated ratios, got {v:?}")),
    }
}

pub fn parse_seeds(v: &str) -> std::result::Result<Vec<u64>, String> {
    parse_items(v).iter().map(|s| parse_num(s)).collect()
}

pub fn parse_loss(v: &str) -> std::result::Result<LossMapping, String> {
    match v.split_once(':') {
        None if v == "negated-reward" => Ok(LossMapping::NegatedReward),
        Some(("hinge", m)) => Ok(LossMapping::Hinge {
            margin: parse_num(m)?,
        }),
        _ => Err(format!(
            "expected negated-reward or hinge:<margin>, got {v:?}"
        )),
    }
}

fn fmt_loss(l: &LossMapping) -> String {
    match l {
        LossMapping::NegatedReward => "negated-reward".into(),
        LossMapping::Hinge { margin } => format!("hinge:{}", fmt_f64(*margin)),
    }
}

/// Every recognized key, in emit order.
pub const KEYS: &[&str] = &[
    "paths.workdir",
    "paths.corpus",
    "paths.image_root",
    "paths.kb_snapshot",
    "paths.ner_gazetteer",
    "paths.llm_recorded",
    "paths.cache",
    "models.text_encoder",
    "models.backbone",
    "models.autoencoder",
    "models.reward",
    "models.preference",
    "models.features",
    "models.iqa",
    "models.detector",
    "models.recognizer",
    "models.ner",
    "models.similarity",
    "models.llm",
    "llm.endpoint",
    "llm.family",
    "llm.parallelism",
    "llm.max_attempts",
    "llm.rewrite",
    "ingest.min_words",
    "ingest.excluded_types",
    "ingest.taxonomy",
    "ingest.min_category_similarity",
    "curate.resolution",
    "curate.iqa_threshold",
    "curate.face_confidence",
    "curate.split",
    "curate.seed",
    "ground.enabled",
    "ground.min_similarity",
    "ground.min_samples",
    "condition.scale_exp",
    "condition.renormalize",
    "train.learning_rate",
    "train.epochs",
    "train.max_steps",
    "train.timesteps",
    "train.loss_window",
    "train.rank",
    "train.alpha",
    "train.batch_size",
    "train.seed",
    "train.scale_exp",
    "train.cross_attention_only",
    "train.rollout_steps",
    "train.checkpoint_every",
    "train.loss",
    "generate.guidance",
    "generate.steps",
    "generate.seeds",
    "generate.resolution",
    "generate.mode",
    "generate.scale_exp",
    "generate.checkpoint",
    "generate.split",
    "eval.face_crop",
    "eval.label",
];

impl PipelineConfig {
    /// Parses `text` on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut errs = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errs.push(format!("line {}: expected key = value", n + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                errs.push(format!("{key}: set more than once"));
                continue;
            }
            if let Err(e) = cfg.set(key, value) {
                errs.push(format!("{key}: {e}"));
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PipelineConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text form (also used for command-line overrides).
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "paths.workdir" => self.paths.workdir = PathBuf::from(v),
            "paths.corpus" => self.paths.corpus = parse_opt_path(v),
            "paths.image_root" => self.paths.image_root = parse_opt_path(v),
            "paths.kb_snapshot" => self.paths.kb_snapshot = parse_opt_path(v),
            "paths.ner_gazetteer" => self.paths.ner_gazetteer = parse_opt_path(v),
            "paths.llm_recorded" => self.paths.llm_recorded = parse_opt_path(v),
            "paths.cache" => self.paths.cache = parse_opt_path(v),
            "models.text_encoder" => self.models.text_encoder = v.into(),
            "models.backbone" => self.models.backbone = v.into(),
            "models.autoencoder" => self.models.autoencoder = v.into(),
            "models.reward" => self.models.reward = v.into(),
            "models.preference" => self.models.preference = v.into(),
            "models.features" => self.models.features = v.into(),
            "models.iqa" => self.models.iqa = v.into(),
            "models.detector" => self.models.detector = v.into(),
            "models.recognizer" => self.models.recognizer = v.into(),
            "models.ner" => self.models.ner = v.into(),
            "models.similarity" => self.models.similarity = v.into(),
            "models.llm" => self.models.llm = v.into(),
            "llm.endpoint" => self.llm.endpoint = v.into(),
            "llm.family" => self.llm.family = v.parse().map_err(|e: Error| e.to_string())?,
            "llm.parallelism" => self.llm.parallelism = parse_num(v)?,
            "llm.max_attempts" => self.llm.max_attempts = parse_num(v)?,
            "llm.rewrite" => self.llm.rewrite = parse_bool(v)?,
            "ingest.min_words" => self.ingest.min_words = parse_num(v)?,
            "ingest.excluded_types" => {
                self.ingest.excluded_types = parse_items(v).into_iter().collect()
            }
            "ingest.taxonomy" => self.ingest.taxonomy = parse_items(v),
            "ingest.min_category_similarity" => self.ingest.min_category_similarity = parse_num(v)?,
            "curate.resolution" => self.curate.resolution = parse_num(v)?,
            "curate.iqa_threshold" => self.curate.iqa_threshold = parse_num(v)?,
            "curate.face_confidence" => self.curate.face_confidence = parse_num(v)?,
            "curate.split" => self.curate.split_ratios = parse_ratios(v)?,
            "curate.seed" => self.curate.seed = parse_num(v)?,
            "ground.enabled" => self.ground.enabled = parse_bool(v)?,
            "ground.min_similarity" => self.ground.min_similarity = parse_num(v)?,
            "ground.min_samples" => self.ground.min_samples = parse_num(v)?,
            "condition.scale_exp" => self.condition.scale_exp = parse_num(v)?,
            "condition.renormalize" => self.condition.renormalize = parse_bool(v)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(v)?,
            "train.epochs" => self.train.epochs = parse_num(v)?,
            "train.max_steps" => self.train_max_steps = parse_num(v)?,
            "train.timesteps" => self.train.scheduler_timesteps = parse_num(v)?,
            "train.loss_window" => {
                let (lo, hi) = v
                    .split_once(':')
                    .ok_or_else(|| format!("expected lo:hi, got {v:?}"))?;
                self.train.loss_timestep_range = (parse_num(lo.trim())?, parse_num(hi.trim())?);
            }
            "train.rank" => self.train.adapter_rank = parse_num(v)?,
            "train.alpha" => self.train.adapter_alpha = parse_num(v)?,
            "train.batch_size" => self.train.batch_size = parse_num(v)?,
            "train.seed" => self.train.seed = parse_num(v)?,
            "train.scale_exp" => self.train.scale_exp = parse_num(v)?,
            "train.cross_attention_only" => self.train.cross_attention_only = parse_bool(v)?,
            "train.rollout_steps" => self.train.rollout_steps = parse_num(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(v)?,
            "train.loss" => self.train.loss = parse_loss(v)?,
            "generate.guidance" => self.generate.guidance_scale = parse_num(v)?,
            "generate.steps" => self.generate.num_inference_steps = parse_num(v)?,
            "generate.seeds" => self.generate.seeds = parse_seeds(v)?,
            "generate.resolution" => self.generate.resolution = parse_num(v)?,
            "generate.mode" => {
                self.generate.mode = v.parse::<GenerationMode>().map_err(|e| e.to_string())?
            }
            "generate.scale_exp" => self.generate.scale_exp = parse_num(v)?,
            "generate.checkpoint" => self.generate.checkpoint = parse_opt_path(v),
            "generate.split" => {
                self.generate_split = v.parse().map_err(|e: Error| e.to_string())?
            }
            "eval.face_crop" => self.eval.face_crop = parse_num(v)?,
            "eval.label" => self.eval.label = v.into(),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Text form of one key's current value.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "paths.workdir" => self.paths.workdir.display().to_string(),
            "paths.corpus" => fmt_opt_path(&self.paths.corpus),
            "paths.image_root" => fmt_opt_path(&self.paths.image_root),
            "paths.kb_snapshot" => fmt_opt_path(&self.paths.kb_snapshot),
            "paths.ner_gazetteer" => fmt_opt_path(&self.paths.ner_gazetteer),
            "paths.llm_recorded" => fmt_opt_path(&self.paths.llm_recorded),
            "paths.cache" => fmt_opt_path(&self.paths.cache),
            "models.text_encoder" => self.models.text_encoder.clone(),
            "models.backbone" => self.models.backbone.clone(),
            "models.autoencoder" => self.models.autoencoder.clone(),
            "models.reward" => self.models.reward.clone(),
            "models.preference" => self.models.preference.clone(),
            "models.features" => self.models.features.clone(),
            "models.iqa" => self.models.iqa.clone(),
            "models.detector" => self.models.detector.clone(),
            "models.recognizer" => self.models.recognizer.clone(),
            "models.ner" => self.models.ner.clone(),
            "models.similarity" => self.models.similarity.clone(),
            "models.llm" => self.models.llm.clone(),
            "llm.endpoint" => self.llm.endpoint.clone(),
            "llm.family" => self.llm.family.to_string(),
            "llm.parallelism" => self.llm.parallelism.to_string(),
            "llm.max_attempts" => self.llm.max_attempts.to_string(),
            "llm.rewrite" => self.llm.rewrite.to_string(),
            "ingest.min_words" => self.ingest.min_words.to_string(),
            "ingest.excluded_types" => {
                fmt_list(&self.ingest.excluded_types.iter().collect::<Vec<_>>())
            }
            "ingest.taxonomy" => fmt_list(&self.ingest.taxonomy),
            "ingest.min_category_similarity" => fmt_f64(self.ingest.min_category_similarity),
            "curate.resolution" => self.curate.resolution.to_string(),
            "curate.iqa_threshold" => fmt_f64(self.curate.iqa_threshold),
            "curate.face_confidence" => fmt_f64(self.curate.face_confidence),
            "curate.split" => {
                let (a, b, c) = self.curate.split_ratios;
                format!("{},{},{}", fmt_f64(a), fmt_f64(b), fmt_f64(c))
            }
            "curate.seed" => self.curate.seed.to_string(),
            "ground.enabled" => self.ground.enabled.to_string(),
            "ground.min_similarity" => fmt_f64(self.ground.min_similarity),
            "ground.min_samples" => self.ground.min_samples.to_string(),
            "condition.scale_exp" => self.condition.scale_exp.to_string(),
            "condition.renormalize" => self.condition.renormalize.to_string(),
            "train.learning_rate" => fmt_f64(self.train.learning_rate),
            "train.epochs" => self.train.epochs.to_string(),
            "train.max_steps" => self.train_max_steps.to_string(),
            "train.timesteps" => self.train.scheduler_timesteps.to_string(),
            "train.loss_window" => format!(
                "{}:{}",
                self.train.loss_timestep_range.0, self.train.loss_timestep_range.1
            ),
            "train.rank" => self.train.adapter_rank.to_string(),
            "train.alpha" => fmt_f64(self.train.adapter_alpha),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.scale_exp" => self.train.scale_exp.to_string(),
            "train.cross_attention_only" => self.train.cross_attention_only.to_string(),
            "train.rollout_steps" => self.train.rollout_steps.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "train.loss" => fmt_loss(&self.train.loss),
            "generate.guidance" => fmt_f64(self.generate.guidance_scale),
            "generate.steps" => self.generate.num_inference_steps.to_string(),
            "generate.seeds" => fmt_list(&self.generate.seeds),
            "generate.resolution" => self.generate.resolution.to_string(),
            "generate.mode" => self.generate.mode.to_string(),
            "generate.scale_exp" => self.generate.scale_exp.to_string(),
            "generate.checkpoint" => fmt_opt_path(&self.generate.checkpoint),
            "generate.split" => self.generate_split.to_string(),
            "eval.face_crop" => self.eval.face_crop.to_string(),
            "eval.label" => self.eval.label.clone(),
            _ => return None,
        })
    }

    /// Every key with its current value; `parse(emit())` reproduces `self`.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {s}\n"));
                section = s;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).unwrap_or_default()));
        }
        out
    }

    /// Range checks on every setting; all violations are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(
            self.ingest.min_words >= 1,
            "ingest.min_words: must be >= 1".into(),
        );
        let s = self.ingest.min_category_similarity;
        check(
            s > 0.0 && s <= 1.0,
            format!("ingest.min_category_similarity: {s} outside (0, 1]"),
        );
        let r = self.curate.resolution;
        check(
            r > 0 && r.is_multiple_of(8),
            format!("curate.resolution: {r} must be a positive multiple of 8"),
        );
        let t = self.curate.iqa_threshold;
        check(
            (0.0..=1.0).contains(&t),
            format!("curate.iqa_threshold: {t} outside [0, 1]"),
        );
        let c = self.curate.face_confidence;
        check(
            (0.0..=1.0).contains(&c),
            format!("curate.face_confidence: {c} outside [0, 1]"),
        );
        let (a, b, cc) = self.curate.split_ratios;
        check(
            [a, b, cc].iter().all(|x| (0.0..=1.0).contains(x)) && (a + b + cc - 1.0).abs() <= 1e-9,
            format!("curate.split: {a},{b},{cc} must be in [0, 1] and sum to 1"),
        );
        let m = self.ground.min_similarity;
        check(
            (-1.0..=1.0).contains(&m),
            format!("ground.min_similarity: {m} outside [-1, 1]"),
        );
        check(
            self.ground.min_samples >= 1,
            "ground.min_samples: must be >= 1".into(),
        );
        let k = self.condition.scale_exp;
        check(
            (0..=4).contains(&k),
            format!("condition.scale_exp: {k} outside 0..=4"),
        );
        check(
            self.llm.parallelism >= 1,
            "llm.parallelism: must be >= 1".into(),
        );
        check(
            self.llm.max_attempts >= 1,
            "llm.max_attempts: must be >= 1".into(),
        );
        check(
            self.eval.face_crop > 0 && self.eval.face_crop.is_multiple_of(8),
            "eval.face_crop: must be a positive multiple of 8".into(),
        );
        for (key, path) in [
            ("paths.corpus", &self.paths.corpus),
            ("paths.image_root", &self.paths.image_root),
            ("paths.kb_snapshot", &self.paths.kb_snapshot),
            ("paths.ner_gazetteer", &self.paths.ner_gazetteer),
            ("paths.llm_recorded", &self.paths.llm_recorded),
        ] {
            if let Some(p) = path {
                check(p.exists(), format!("{key}: {} does not exist", p.display()));
            }
        }
        if let Err(Error::Config(e)) = self.train.validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.generate.validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Response cache directory: `$SAFE_CACHE_DIR`, then `paths.cache`, then
    /// `<workdir>/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        std::env::var_os(ENV_CACHE_DIR)
            .map(PathBuf::from)
            .or_else(|| self.paths.cache.clone())
            .unwrap_or_else(|| self.paths.workdir.join("cache"))
    }
}
