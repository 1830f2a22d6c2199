//! Multi-modal entity grounding: mention linking against a local knowledge
//! snapshot, reference face profiles, face verification, face-aware cropping
//! and entity-subset construction.

mod kb;
mod profiles;

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use kb::{AliasLinker, EntityLinker, KbEntity, KnowledgeSnapshot, LinkCandidate};
pub use profiles::{build_profile, EntityProfile, ProfileRepository};

use crate::corpus::CaptionRecord;
use crate::imaging::{apply_crop, resize_short_side, CropBox, FaceBox, FaceDetector};
use crate::{Error, Result};

pub const DEFAULT_MIN_SIMILARITY: f64 = 0.5;
pub const DEFAULT_MIN_SAMPLES: usize = 43;

/// Turns a face crop into an embedding vector.
pub trait FaceEmbedder: Send + Sync {
    fn id(&self) -> &str;

    fn embed(&self, image: &RgbImage, face: &FaceBox) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedMention {
    pub record_id: String,
    pub surface: String,
    pub entity_id: String,
    pub link_confidence: f64,
}

/// Result of linking one record: linked mentions plus the surfaces dropped as
/// unlinkable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Linking {
    pub mentions: Vec<GroundedMention>,
    pub unlinkable: Vec<String>,
}

pub fn link_mentions(record: &CaptionRecord, linker: &dyn EntityLinker) -> Result<Linking> {
    let mut out = Linking::default();
    for m in &record.entity_mentions {
        match linker.link(&m.surface, &m.label, &record.caption)? {
            Some(c) => out.mentions.push(GroundedMention {
                record_id: record.id.clone(),
                surface: m.surface.clone(),
                entity_id: c.entity_id,
                link_confidence: c.confidence,
            }),
            None => out.unlinkable.push(m.surface.clone()),
        }
    }
    Ok(out)
}

pub fn l2_normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

/// Cosine similarity of the unit-normalized inputs, in `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "embedding lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (Some(a), Some(b)) = (l2_normalize(a), l2_normalize(b)) else {
        return Err(Error::InvalidArgument(
            "zero or non-finite embedding".into(),
        ));
    };
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub present: bool,
    pub best_box: Option<FaceBox>,
    pub similarity: Option<f64>,
}

/// Best-matching face (first on ties) for a set of detections.
pub fn best_face_match(
    image: &RgbImage,
    faces: &[FaceBox],
    reference: &[f32],
    embedder: &dyn FaceEmbedder,
) -> Result<Option<(FaceBox, f64)>> {
    let mut best: Option<(FaceBox, f64)> = None;
    for face in faces {
        let s = cosine_similarity(&embedder.embed(image, face)?, reference)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((*face, s));
        }
    }
    Ok(best)
}

pub fn verify_entity_in_image(
    image: &RgbImage,
    profile: &EntityProfile,
    detector: &dyn FaceDetector,
    embedder: &dyn FaceEmbedder,
    min_similarity: f64,
) -> Result<Verification> {
    let faces = detector.detect(image)?;
    match best_face_match(image, &faces, &profile.reference_embedding, embedder)? {
        None => Ok(Verification {
            present: false,
            best_box: None,
            similarity: None,
        }),
        Some((b, s)) => Ok(Verification {
            present: s >= min_similarity,
            best_box: Some(b),
            similarity: Some(s),
        }),
    }
}

/// Square window, fully inside a `width` x `height` image, whose center is
/// nearest the face-box center; smaller offsets win ties.
pub fn face_aware_crop(width: u32, height: u32, face: &FaceBox, target: u32) -> Result<CropBox> {
    if face.w == 0 || face.h == 0 {
        return Err(Error::EmptyFaceBox);
    }
    if face.x as u64 + face.w as u64 > width as u64 || face.y as u64 + face.h as u64 > height as u64
    {
        return Err(Error::InvalidArgument("face box outside image".into()));
    }
    if target == 0 || width < target || height < target {
        return Err(Error::InvalidArgument(format!(
            "image {width}x{height} smaller than target {target}"
        )));
    }
    let (cx2, cy2) = face.center_x2();
    // minimize |2*off + target - 2c| over integer off in [0, max]
    let axis = |c2: i64, max: i64| -> u32 {
        let t = target as i64;
        let lo = (c2 - t).div_euclid(2);
        let cands = [lo, lo + 1];
        let mut best = (i64::MAX, 0i64);
        for off in cands.into_iter().map(|o| o.clamp(0, max)) {
            let d = (2 * off + t - c2).abs();
            if d < best.0 || (d == best.0 && off < best.1) {
                best = (d, off);
            }
        }
        best.1 as u32
    };
    let x = axis(cx2, (width - target) as i64);
    let y = axis(cy2, (height - target) as i64);
    Ok(CropBox::new(x, y, target, target))
}

/// Resizes so the short side equals `target`, then crops around `face`
/// (given in original-image coordinates).
pub fn crop_around_face(
    image: &RgbImage,
    face: &FaceBox,
    target: u32,
) -> Result<(RgbImage, CropBox)> {
    let (resized, scale) = resize_short_side(image, target)?;
    let scaled = face.scaled(scale, resized.width(), resized.height());
    let b = face_aware_crop(resized.width(), resized.height(), &scaled, target)?;
    Ok((apply_crop(&resized, b), b))
}

/// One record's verification against the entity its caption mentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedPair {
    pub record_id: String,
    pub entity_id: String,
    pub present: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntitySubset {
    pub pairs: Vec<VerifiedPair>,
    pub counts: BTreeMap<String, usize>,
    pub dropped_entities: BTreeMap<String, usize>,
}

/// Keeps verified pairs of known entities, then drops whole entity classes
/// with fewer than `min_samples` verified pairs.
pub fn build_entity_subset(
    pairs: &[VerifiedPair],
    known_entities: &BTreeSet<String>,
    min_samples: usize,
) -> EntitySubset {
    let verified: Vec<&VerifiedPair> = pairs
        .iter()
        .filter(|p| p.present && known_entities.contains(&p.entity_id))
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in &verified {
        *counts.entry(p.entity_id.clone()).or_default() += 1;
    }
    let (kept, dropped): (BTreeMap<_, _>, BTreeMap<_, _>) =
        counts.into_iter().partition(|(_, n)| *n >= min_samples);
    EntitySubset {
        pairs: verified
            .into_iter()
            .filter(|p| kept.contains_key(&p.entity_id))
            .cloned()
            .collect(),
        counts: kept,
        dropped_entities: dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fface(x: u32, y: u32, w: u32, h: u32) -> FaceBox {
        FaceBox {
            x,
            y,
            w,
            h,
            confidence: 1.0,
        }
    }

    #[test]
    fn centered_face_centered_crop() {
        let b = face_aware_crop(100, 60, &fface(40, 20, 20, 20), 40).unwrap();
        assert_eq!(b, CropBox::new(30, 10, 40, 40));
    }

    #[test]
    fn border_face_clamps() {
        let b = face_aware_crop(100, 40, &fface(0, 5, 6, 6), 40).unwrap();
        assert_eq!(b, CropBox::new(0, 0, 40, 40));
        let b = face_aware_crop(100, 40, &fface(95, 5, 5, 6), 40).unwrap();
        assert_eq!(b.x, 60);
        assert_eq!(
            face_aware_crop(100, 40, &fface(1, 1, 0, 3), 40)
                .unwrap_err()
                .code(),
            "empty_face_box"
        );
    }

    #[test]
    fn subset_drops_small_classes() {
        let mut pairs = Vec::new();
        for i in 0..43 {
            pairs.push(VerifiedPair {
                record_id: format!("a{i}"),
                entity_id: "A".into(),
                present: true,
            });
        }
        for i in 0..42 {
            pairs.push(VerifiedPair {
                record_id: format!("b{i}"),
                entity_id: "B".into(),
                present: true,
            });
        }
        pairs.push(VerifiedPair {
            record_id: "c".into(),
            entity_id: "A".into(),
            present: false,
        });
        let known: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let s = build_entity_subset(&pairs, &known, DEFAULT_MIN_SAMPLES);
        assert_eq!(s.counts.get("A"), Some(&43));
        assert!(!s.counts.contains_key("B"));
        assert_eq!(s.dropped_entities.get("B"), Some(&42));
        assert_eq!(s.pairs.len(), 43);
    }

    #[test]
    fn cosine_range() {
        assert!((cosine_similarity(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 0.0], &[-3.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }
}
