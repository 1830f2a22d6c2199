//! Face detection and recognition for the synthetic fixture domain.
//!
//! Faces are rendered as skin-toned rectangles whose interior carries an 8x8
//! identity texture (see [`crate::synthetic::draw_face`]). The detector finds
//! connected skin-colored components; the embedder resamples a face crop to the
//! 8x8 texture grid.

use std::collections::VecDeque;

use image::{imageops, GrayImage, Rgb, RgbImage};

use crate::grounding::{l2_normalize, FaceEmbedder};
use crate::imaging::{FaceBox, FaceDetector};
use crate::{Error, Result};

pub const SKIN_BASE: [u8; 3] = [224, 172, 105];
pub const TEXTURE_AMPLITUDE: i32 = 24;
pub const EMBEDDING_GRID: u32 = 8;

pub fn is_skin(p: &Rgb<u8>) -> bool {
    let [r, g, b] = p.0.map(i32::from);
    (180..=255).contains(&r)
        && (120..=215).contains(&g)
        && (60..=150).contains(&b)
        && (30..=75).contains(&(r - g))
        && (45..=90).contains(&(g - b))
}

#[derive(Debug, Clone)]
pub struct MarkerFaceDetector {
    pub min_area: u32,
}

impl Default for MarkerFaceDetector {
    fn default() -> Self {
        MarkerFaceDetector { min_area: 36 }
    }
}

impl FaceDetector for MarkerFaceDetector {
    fn id(&self) -> &str {
        "marker-face-v1"
    }

    fn detect(&self, image: &RgbImage) -> Result<Vec<FaceBox>> {
        let (w, h) = image.dimensions();
        let mut seen = vec![false; (w * h) as usize];
        let mut out = Vec::new();
        for y0 in 0..h {
            for x0 in 0..w {
                let idx0 = (y0 * w + x0) as usize;
                if seen[idx0] || !is_skin(image.get_pixel(x0, y0)) {
                    continue;
                }
                seen[idx0] = true;
                let (mut minx, mut miny, mut maxx, mut maxy, mut area) = (x0, y0, x0, y0, 0u32);
                let mut queue = VecDeque::from([(x0, y0)]);
                while let Some((x, y)) = queue.pop_front() {
                    area += 1;
                    minx = minx.min(x);
                    maxx = maxx.max(x);
                    miny = miny.min(y);
                    maxy = maxy.max(y);
                    let neighbors = [
                        (x.wrapping_sub(1), y),
                        (x + 1, y),
                        (x, y.wrapping_sub(1)),
                        (x, y + 1),
                    ];
                    for (nx, ny) in neighbors {
                        if nx < w && ny < h {
                            let ni = (ny * w + nx) as usize;
                            if !seen[ni] && is_skin(image.get_pixel(nx, ny)) {
                                seen[ni] = true;
                                queue.push_back((nx, ny));
                            }
                        }
                    }
                }
                let (bw, bh) = (maxx - minx + 1, maxy - miny + 1);
                if area < self.min_area || bw < 6 || bh < 6 {
                    continue;
                }
                let fill = area as f64 / (bw as f64 * bh as f64);
                let size = ((area as f64).sqrt() / 16.0).min(1.0);
                let aspect = (bw.min(bh) as f64 / bw.max(bh) as f64).sqrt();
                out.push(FaceBox {
                    x: minx,
                    y: miny,
                    w: bw,
                    h: bh,
                    confidence: (fill * size * aspect).clamp(0.0, 1.0),
                });
            }
        }
        Ok(out)
    }
}

/// Mean-removed 8x8 luminance grid of the face crop, unit-normalized.
#[derive(Debug, Clone, Default)]
pub struct PatchFaceEmbedder;

impl FaceEmbedder for PatchFaceEmbedder {
    fn id(&self) -> &str {
        "patch-face-v1"
    }

    fn embed(&self, image: &RgbImage, face: &FaceBox) -> Result<Vec<f32>> {
        if face.w == 0 || face.h == 0 {
            return Err(Error::EmptyFaceBox);
        }
        if !crate::imaging::CropBox::new(face.x, face.y, face.w, face.h)
            .within(image.width(), image.height())
        {
            return Err(Error::InvalidArgument("face box outside image".into()));
        }
        let crop = imageops::crop_imm(image, face.x, face.y, face.w, face.h).to_image();
        let gray: GrayImage = imageops::grayscale(&crop);
        let grid = imageops::resize(
            &gray,
            EMBEDDING_GRID,
            EMBEDDING_GRID,
            imageops::FilterType::Triangle,
        );
        let values: Vec<f32> = grid.pixels().map(|p| p[0] as f32).collect();
        let mean = values.iter().sum::<f32>() / values.len() as f32;
        let centered: Vec<f32> = values.iter().map(|v| v - mean).collect();
        Ok(l2_normalize(&centered).unwrap_or_else(|| {
            let mut e = vec![0.0; centered.len()];
            e[0] = 1.0;
            e
        }))
    }
}
