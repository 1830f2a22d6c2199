//! Error type shared by every stage.
//!
//! Each variant carries a stable machine-readable code (see [`Error::code`]) that
//! is written into manifests, ledgers and CLI output.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("caption is empty")]
    EmptyCaption,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("record {0} already has a split assigned")]
    SplitReassignment(String),

    #[error("named-entity recognizer unavailable: {0}")]
    NerBackendUnavailable(String),

    #[error("image has zero area")]
    EmptyImage,

    #[error("image quality model unavailable: {0}")]
    IqaBackendUnavailable(String),

    #[error("face detector unavailable: {0}")]
    DetectorUnavailable(String),

    #[error("face recognizer unavailable: {0}")]
    RecognizerUnavailable(String),

    #[error("face box is degenerate")]
    EmptyFaceBox,

    #[error("entity linker unavailable: {0}")]
    LinkerUnavailable(String),

    #[error("knowledge snapshot missing at {0}")]
    KbSnapshotMissing(PathBuf),

    #[error("reference image for {0} contains no detectable face")]
    ReferenceWithoutFace(String),

    #[error("LLM unreachable after {attempts} attempt(s): {message}")]
    LlmUnreachable { attempts: u32, message: String },

    #[error("token span {start}..={end} out of bounds for sequence of length {len}")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("weight vector has length {weights} but the sequence has {tokens} tokens")]
    WeightLengthMismatch { weights: usize, tokens: usize },

    #[error("caption needs {tokens} tokens but the encoder context is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },

    #[error("scale exponent {0} is outside the supported range 0..=4")]
    UnsupportedScaleExponent(i64),

    #[error("adapter rank {rank} must be below min(out, in) = {limit} for {site}")]
    RankTooLarge {
        site: String,
        rank: usize,
        limit: usize,
    },

    #[error("checkpoint integrity check failed: {0}")]
    CheckpointIntegrity(String),

    #[error("checkpoint was trained against a different base model")]
    CheckpointIncompatible,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("model unavailable: {0}")]
    ModelUnavailable(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("stage {stage} requires {missing} to have run first")]
    MissingPrerequisite { stage: String, missing: String },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier for the failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyCaption => "empty_caption",
            Error::EmptyCorpus => "empty_corpus",
            Error::SplitReassignment(_) => "split_reassignment",
            Error::NerBackendUnavailable(_) => "ner_backend_unavailable",
            Error::EmptyImage => "empty_image",
            Error::IqaBackendUnavailable(_) => "iqa_backend_unavailable",
            Error::DetectorUnavailable(_) => "detector_unavailable",
            Error::RecognizerUnavailable(_) => "recognizer_unavailable",
            Error::EmptyFaceBox => "empty_face_box",
            Error::LinkerUnavailable(_) => "linker_unavailable",
            Error::KbSnapshotMissing(_) => "kb_snapshot_missing",
            Error::ReferenceWithoutFace(_) => "reference_without_face",
            Error::LlmUnreachable { .. } => "llm_unreachable",
            Error::SpanOutOfBounds { .. } => "span_out_of_bounds",
            Error::WeightLengthMismatch { .. } => "weight_length_mismatch",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::UnsupportedScaleExponent(_) => "unsupported_scale_exponent",
            Error::RankTooLarge { .. } => "rank_too_large",
            Error::CheckpointIntegrity(_) => "checkpoint_integrity",
            Error::CheckpointIncompatible => "checkpoint_incompatible",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ModelUnavailable(_) => "model_unavailable",
            Error::Config(_) => "config_invalid",
            Error::MissingPrerequisite { .. } => "missing_prerequisite",
            Error::Manifest { .. } => "manifest_invalid",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}
