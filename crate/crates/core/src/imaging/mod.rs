//! Image standardization and gating: entropy-based square cropping, a
//! reference-free quality gate and face flagging for the non-entity subset.

mod entropy;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

pub use entropy::{entropy_crop, entropy_window, histogram_entropy, window_stride};

use crate::{Error, Result};

pub const DEFAULT_TARGET: u32 = 512;
pub const DEFAULT_IQA_THRESHOLD: f64 = 0.3;
pub const DEFAULT_FACE_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        CropBox { x, y, w, h }
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub confidence: f64,
}

impl FaceBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Box center, doubled so it stays integral.
    pub fn center_x2(&self) -> (i64, i64) {
        (
            2 * self.x as i64 + self.w as i64,
            2 * self.y as i64 + self.h as i64,
        )
    }

    pub fn iou(&self, other: &FaceBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = (x1 - x0) as f64 * (y1 - y0) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }

    /// Same box in an image resized by `scale`, clamped to `(width, height)`.
    pub fn scaled(&self, scale: f64, width: u32, height: u32) -> FaceBox {
        let x = ((self.x as f64 * scale).floor() as u32).min(width.saturating_sub(1));
        let y = ((self.y as f64 * scale).floor() as u32).min(height.saturating_sub(1));
        let w = ((self.w as f64 * scale).round() as u32).clamp(1, width - x);
        let h = ((self.h as f64 * scale).round() as u32).clamp(1, height - y);
        FaceBox {
            x,
            y,
            w,
            h,
            confidence: self.confidence,
        }
    }
}

/// Per-image curation columns of the shared manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub crop_box: Option<CropBox>,
    #[serde(default)]
    pub iqa_score: Option<f64>,
    #[serde(default)]
    pub face_boxes: Option<Vec<FaceBox>>,
    #[serde(default)]
    pub quality_pass: Option<bool>,
}

/// Reference-free image quality model producing scores in `[0, 1]`.
pub trait IqaModel: Send + Sync {
    fn id(&self) -> &str;

    fn score(&self, image: &RgbImage) -> Result<f64>;
}

pub trait FaceDetector: Send + Sync {
    fn id(&self) -> &str;

    fn detect(&self, image: &RgbImage) -> Result<Vec<FaceBox>>;
}

/// Proportionally resizes so the short side equals `target`.
pub fn resize_short_side(image: &RgbImage, target: u32) -> Result<(RgbImage, f64)> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    if target == 0 {
        return Err(Error::InvalidArgument(
            "target side must be positive".into(),
        ));
    }
    let short = w.min(h);
    if short == target {
        return Ok((image.clone(), 1.0));
    }
    let scale = target as f64 / short as f64;
    let (nw, nh) = if w <= h {
        (target, ((h as f64 * scale).round() as u32).max(target))
    } else {
        (((w as f64 * scale).round() as u32).max(target), target)
    };
    Ok((
        imageops::resize(image, nw, nh, imageops::FilterType::Triangle),
        scale,
    ))
}

pub fn apply_crop(image: &RgbImage, b: CropBox) -> RgbImage {
    imageops::crop_imm(image, b.x, b.y, b.w, b.h).to_image()
}

pub fn score_quality(image: &RgbImage, iqa: Option<&dyn IqaModel>) -> Result<f64> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::EmptyImage);
    }
    let iqa =
        iqa.ok_or_else(|| Error::IqaBackendUnavailable("no quality model configured".into()))?;
    let s = iqa.score(image)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::IqaBackendUnavailable(format!(
            "{} returned out-of-range score {s}",
            iqa.id()
        )));
    }
    Ok(s)
}

/// Inclusive quality gate.
pub fn passes_quality(score: f64, threshold: f64) -> bool {
    score >= threshold
}

pub fn flag_faces(
    image: &RgbImage,
    detector: Option<&dyn FaceDetector>,
    min_confidence: f64,
) -> Result<Vec<FaceBox>> {
    if !(0.0..=1.0).contains(&min_confidence) {
        return Err(Error::InvalidArgument(format!(
            "min_confidence {min_confidence} outside [0, 1]"
        )));
    }
    let detector =
        detector.ok_or_else(|| Error::DetectorUnavailable("no face detector configured".into()))?;
    let mut boxes = detector.detect(image)?;
    boxes.retain(|b| b.confidence >= min_confidence);
    Ok(boxes)
}

/// Standardized crop plus its curation record.
#[derive(Debug, Clone)]
pub struct Curated {
    pub record: ImageRecord,
    pub image: RgbImage,
}

/// Resize, entropy-crop, score the final crop and optionally flag faces.
pub fn curate_image(
    id: &str,
    path: &str,
    image: &RgbImage,
    target: u32,
    iqa: Option<&dyn IqaModel>,
    iqa_threshold: f64,
    face_detector: Option<(&dyn FaceDetector, f64)>,
) -> Result<Curated> {
    let (resized, _) = resize_short_side(image, target)?;
    let crop = entropy_window(&imageops::grayscale(&resized), target);
    let cropped = apply_crop(&resized, crop);
    let score = score_quality(&cropped, iqa)?;
    let faces = match face_detector {
        Some((det, conf)) => Some(flag_faces(&cropped, Some(det), conf)?),
        None => None,
    };
    Ok(Curated {
        record: ImageRecord {
            id: id.to_string(),
            path: path.to_string(),
            width: image.width(),
            height: image.height(),
            crop_box: Some(crop),
            iqa_score: Some(score),
            face_boxes: faces,
            quality_pass: Some(passes_quality(score, iqa_threshold)),
        },
        image: cropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn inclusive_threshold() {
        assert!(passes_quality(0.3, DEFAULT_IQA_THRESHOLD));
        assert!(!passes_quality(0.2999, DEFAULT_IQA_THRESHOLD));
    }

    #[test]
    fn resize_keeps_aspect() {
        let img = RgbImage::from_pixel(200, 100, Rgb([1, 2, 3]));
        let (r, scale) = resize_short_side(&img, 50).unwrap();
        assert_eq!(r.dimensions(), (100, 50));
        assert_eq!(scale, 0.5);
        assert!(matches!(
            resize_short_side(&RgbImage::new(0, 10), 5),
            Err(Error::EmptyImage)
        ));
    }

    #[test]
    fn missing_backends() {
        let img = RgbImage::new(4, 4);
        assert_eq!(
            score_quality(&img, None).unwrap_err().code(),
            "iqa_backend_unavailable"
        );
        assert_eq!(
            flag_faces(&img, None, 0.5).unwrap_err().code(),
            "detector_unavailable"
        );
    }

    #[test]
    fn iou_basics() {
        let a = FaceBox {
            x: 0,
            y: 0,
            w: 10,
            h: 10,
            confidence: 1.0,
        };
        let b = FaceBox {
            x: 5,
            y: 0,
            w: 10,
            h: 10,
            confidence: 1.0,
        };
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }
}
