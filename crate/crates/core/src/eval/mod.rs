//! Evaluation metrics: Fréchet distance between Gaussian fits of image
//! features, alignment/preference scores, and face-based entity metrics,
//! assembled into a per-run report.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::grounding::{best_face_match, crop_around_face, EntityProfile, FaceEmbedder};
use crate::imaging::{FaceBox, FaceDetector};
use crate::zoo::{AlignmentScorer, ImageFeatureExtractor};
use crate::{Error, Result};

/// `n x d` feature matrix with lazily computed moments.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub extractor_id: String,
    features: DMatrix<f64>,
    mean: OnceCell<DVector<f64>>,
    covariance: OnceCell<DMatrix<f64>>,
}

impl FeatureSet {
    pub fn new(extractor_id: &str, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(
                "feature rows differ in width".into(),
            ));
        }
        Ok(FeatureSet {
            extractor_id: extractor_id.to_string(),
            features: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            mean: OnceCell::new(),
            covariance: OnceCell::new(),
        })
    }

    pub fn extract(extractor: &dyn ImageFeatureExtractor, images: &[RgbImage]) -> Result<Self> {
        let rows = images
            .iter()
            .map(|img| extractor.extract(img))
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(extractor.id(), &rows)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.mean.get_or_init(|| {
            let n = self.n().max(1) as f64;
            DVector::from_fn(self.d(), |j, _| {
                self.features.column(j).iter().sum::<f64>() / n
            })
        })
    }

    /// Unbiased (`n - 1`) covariance, symmetrized.
    pub fn covariance(&self) -> Result<&DMatrix<f64>> {
        if self.n() < 2 {
            return Err(Error::InvalidArgument(format!(
                "covariance needs n >= 2, got {}",
                self.n()
            )));
        }
        let mean = self.mean().clone();
        Ok(self.covariance.get_or_init(|| {
            let mut centered = self.features.clone();
            for mut row in centered.row_iter_mut() {
                row -= mean.transpose();
            }
            let c = (centered.transpose() * &centered) / (self.n() as f64 - 1.0);
            (&c + c.transpose()) * 0.5
        }))
    }
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((S_x S_y)^(1/2))` as `Tr((R S_y R)^(1/2))` with `R = S_x^(1/2)`, so
/// every root taken is of a symmetric PSD matrix.
fn cross_trace(cx: &DMatrix<f64>, cy: &DMatrix<f64>) -> f64 {
    let root = sqrtm_psd(cx);
    let inner = &root * cy * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    nalgebra::SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at zero.
///
/// The cross trace is averaged over both argument orders: with rank-deficient
/// covariances the clamped roots of tiny eigenvalues differ slightly between
/// the two factorizations, and averaging makes the result exactly symmetric.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::DimensionMismatch(format!(
            "feature widths {} and {}",
            a.d(),
            b.d()
        )));
    }
    let (ca, cb) = (a.covariance()?, b.covariance()?);
    let diff = a.mean() - b.mean();
    let (ab, ba) = (cross_trace(ca, cb), cross_trace(cb, ca));
    // both sums commute exactly, so swapping the arguments changes nothing
    let d = diff.norm_squared() + (ca.trace() + cb.trace()) - (ab + ba);
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub scorer_id: String,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

pub fn score_alignment(
    images: &[RgbImage],
    captions: &[String],
    scorer: Option<&dyn AlignmentScorer>,
) -> Result<AlignmentScores> {
    let scorer = scorer.ok_or_else(|| Error::ModelUnavailable("alignment scorer".into()))?;
    if images.len() != captions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} captions",
            images.len(),
            captions.len()
        )));
    }
    let per_sample = images
        .iter()
        .zip(captions)
        .map(|(i, c)| scorer.score(i, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentScores {
        scorer_id: scorer.id().to_string(),
        mean: mean(&per_sample).unwrap_or(0.0),
        per_sample,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMetrics {
    pub detect_accuracy: f64,
    /// Absent when no image contains a face.
    pub identity_preservation: Option<f64>,
    /// Best similarity per image, `None` for face-free images.
    pub per_image: Vec<Option<f64>>,
}

/// Each image is paired with its target profile. A face counts as detected
/// when the detector returns at least one box; the identity score of an image
/// is the highest cosine similarity among its faces.
pub fn entity_metrics(
    samples: &[(&RgbImage, &EntityProfile)],
    detector: &dyn FaceDetector,
    recognizer: &dyn FaceEmbedder,
) -> Result<EntityMetrics> {
    let mut per_image = Vec::with_capacity(samples.len());
    for (image, profile) in samples {
        let faces = detector.detect(image)?;
        let best = best_face_match(image, &faces, &profile.reference_embedding, recognizer)?;
        per_image.push(best.map(|(_, s)| s));
    }
    let found: Vec<f64> = per_image.iter().flatten().copied().collect();
    let detect_accuracy = if samples.is_empty() {
        0.0
    } else {
        found.len() as f64 / samples.len() as f64
    };
    Ok(EntityMetrics {
        detect_accuracy,
        identity_preservation: mean(&found),
        per_image,
    })
}

/// Face-aware evaluation view: a `target`-square crop around the largest
/// detected face, or the image unchanged when there is none (or it is too
/// small to crop).
pub fn face_aware_view(
    image: &RgbImage,
    detector: &dyn FaceDetector,
    target: u32,
) -> Result<RgbImage> {
    let faces = detector.detect(image)?;
    let largest: Option<FaceBox> =
        faces
            .iter()
            .copied()
            .reduce(|a, b| if b.area() > a.area() { b } else { a });
    match largest {
        Some(face) if image.width() >= target && image.height() >= target => {
            Ok(crop_around_face(image, &face, target)?.0)
        }
        _ => Ok(image.clone()),
    }
}

/// Metrics of one seed's generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub sample_count: usize,
    pub fid: Option<f64>,
    pub image_reward: Option<AlignmentScores>,
    pub hps: Option<AlignmentScores>,
    pub entity: Option<EntityMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fid: Option<f64>,
    pub image_reward_mean: Option<f64>,
    pub hps_mean: Option<f64>,
    pub detect_accuracy: Option<f64>,
    pub identity_preservation: Option<f64>,
    pub sample_count: usize,
    pub seeds: Vec<u64>,
    pub entity_mode: bool,
    /// Checkpoint hash, extractor/scorer ids and similar.
    pub provenance: BTreeMap<String, String>,
    pub runs: Vec<SeedRun>,
}

fn mean_of<F: Fn(&SeedRun) -> Option<f64>>(runs: &[SeedRun], f: F) -> Option<f64> {
    let vals: Option<Vec<f64>> = runs.iter().map(f).collect();
    vals.and_then(|v| mean(&v))
}

/// Averages per-seed means. A metric missing from any run is absent in the
/// report.
pub fn build_report(
    label: &str,
    runs: Vec<SeedRun>,
    entity_mode: bool,
    provenance: BTreeMap<String, String>,
) -> EvalReport {
    let detect_accuracy = if entity_mode {
        mean_of(&runs, |r| r.entity.as_ref().map(|e| e.detect_accuracy))
    } else {
        None
    };
    let identity_preservation = if entity_mode {
        mean_of(&runs, |r| {
            r.entity.as_ref().and_then(|e| e.identity_preservation)
        })
    } else {
        None
    };
    EvalReport {
        label: label.to_string(),
        fid: mean_of(&runs, |r| r.fid),
        image_reward_mean: mean_of(&runs, |r| r.image_reward.as_ref().map(|s| s.mean)),
        hps_mean: mean_of(&runs, |r| r.hps.as_ref().map(|s| s.mean)),
        detect_accuracy,
        identity_preservation,
        sample_count: runs.iter().map(|r| r.sample_count).sum(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        entity_mode,
        provenance,
        runs,
    }
}

/// Invariant check; returns every violation.
pub fn validate_report(report: &EvalReport) -> std::result::Result<(), Vec<String>> {
    let mut errs = Vec::new();
    if let Some(f) = report.fid {
        if !f.is_finite() || f < -1e-8 {
            errs.push(format!("fid {f} is negative or non-finite"));
        }
    }
    for (name, v) in [
        ("image_reward_mean", report.image_reward_mean),
        ("hps_mean", report.hps_mean),
    ] {
        if v.is_some_and(|v| !v.is_finite()) {
            errs.push(format!("{name} is non-finite"));
        }
    }
    if let Some(d) = report.detect_accuracy {
        if !(0.0..=1.0).contains(&d) {
            errs.push(format!("detect_accuracy {d} outside [0, 1]"));
        }
    }
    if let Some(i) = report.identity_preservation {
        if !(-1.0..=1.0).contains(&i) {
            errs.push(format!("identity_preservation {i} outside [-1, 1]"));
        }
    }
    if report.entity_mode != report.detect_accuracy.is_some() {
        errs.push("entity metrics must be present exactly in entity mode".into());
    }
    if !report.entity_mode && report.identity_preservation.is_some() {
        errs.push("identity_preservation present outside entity mode".into());
    }
    if report.seeds.is_empty() || report.seeds.len() != report.runs.len() {
        errs.push("one run per seed required".into());
    }
    if report.sample_count == 0 {
        errs.push("report covers no samples".into());
    }
    for run in &report.runs {
        for s in [&run.image_reward, &run.hps].into_iter().flatten() {
            let recomputed = mean(&s.per_sample).unwrap_or(0.0);
            if (recomputed - s.mean).abs() > 1e-12 {
                errs.push(format!(
                    "seed {}: {} mean disagrees with its samples",
                    run.seed, s.scorer_id
                ));
            }
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ResultLine {
    Report {
        label: String,
        sample_count: usize,
        seeds: Vec<u64>,
        entity_mode: bool,
        provenance: BTreeMap<String, String>,
    },
    /// `value: null` marks an absent metric.
    Metric {
        name: String,
        value: Option<f64>,
    },
    Run(SeedRun),
}

pub const METRIC_FID: &str = "fid_clip";
pub const METRIC_IMAGE_REWARD: &str = "image_reward";
pub const METRIC_HPS: &str = "hps_v2";
pub const METRIC_DETECT: &str = "detect_accuracy";
pub const METRIC_IDENTITY: &str = "identity_preservation";

impl EvalReport {
    fn metrics(&self) -> [(&'static str, Option<f64>); 5] {
        [
            (METRIC_FID, self.fid),
            (METRIC_IMAGE_REWARD, self.image_reward_mean),
            (METRIC_HPS, self.hps_mean),
            (METRIC_DETECT, self.detect_accuracy),
            (METRIC_IDENTITY, self.identity_preservation),
        ]
    }

    pub fn to_lines(&self) -> Vec<ResultLine> {
        let mut lines = vec![ResultLine::Report {
            label: self.label.clone(),
            sample_count: self.sample_count,
            seeds: self.seeds.clone(),
            entity_mode: self.entity_mode,
            provenance: self.provenance.clone(),
        }];
        lines.extend(self.metrics().iter().map(|(n, v)| ResultLine::Metric {
            name: n.to_string(),
            value: *v,
        }));
        lines.extend(self.runs.iter().cloned().map(ResultLine::Run));
        lines
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for line in self.to_lines() {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<EvalReport> {
        let mut report: Option<EvalReport> = None;
        for (i, raw) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let bad = |m: String| Error::Manifest {
                line: i + 1,
                message: m,
            };
            let line: ResultLine = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            match (line, report.as_mut()) {
                (
                    ResultLine::Report {
                        label,
                        sample_count,
                        seeds,
                        entity_mode,
                        provenance,
                    },
                    None,
                ) => {
                    report = Some(EvalReport {
                        label,
                        fid: None,
                        image_reward_mean: None,
                        hps_mean: None,
                        detect_accuracy: None,
                        identity_preservation: None,
                        sample_count,
                        seeds,
                        entity_mode,
                        provenance,
                        runs: Vec::new(),
                    })
                }
                (ResultLine::Report { .. }, Some(_)) => {
                    return Err(bad("second report header".into()))
                }
                (_, None) => return Err(bad("metric before report header".into())),
                (ResultLine::Metric { name, value }, Some(r)) => {
                    let slot = match name.as_str() {
                        METRIC_FID => &mut r.fid,
                        METRIC_IMAGE_REWARD => &mut r.image_reward_mean,
                        METRIC_HPS => &mut r.hps_mean,
                        METRIC_DETECT => &mut r.detect_accuracy,
                        METRIC_IDENTITY => &mut r.identity_preservation,
                        other => return Err(bad(format!("unknown metric {other}"))),
                    };
                    *slot = value;
                }
                (ResultLine::Run(run), Some(r)) => r.runs.push(run),
            }
        }
        report.ok_or(Error::Manifest {
            line: 0,
            message: "empty results file".into(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<EvalReport> {
        EvalReport::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Markdown table, columns in the order FID_CLIP, ImageReward, HPS V2
    /// (then the entity metrics in entity mode).
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut header = vec!["Model", "FID_CLIP (↓)", "ImageReward (↑)", "HPS V2 (↑)"];
        let mut row = vec![
            self.label.clone(),
            cell(self.fid),
            cell(self.image_reward_mean),
            cell(self.hps_mean),
        ];
        if self.entity_mode {
            header.extend(["Detect Acc. (↑)", "Identity (↑)"]);
            row.extend([cell(self.detect_accuracy), cell(self.identity_preservation)]);
        }
        let sep: Vec<String> = header.iter().map(|_| "---".to_string()).collect();
        format!(
            "| {} |\n| {} |\n| {} |\n",
            header.join(" | "),
            sep.join(" | "),
            row.join(" | ")
        )
    }
}
