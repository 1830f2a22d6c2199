use image::{imageops, RgbImage};

use crate::imaging::IqaModel;
use crate::{Error, Result};

/// Reference-free quality score from two cues: spatial coherence (correlation
/// of neighboring pixels, near zero for noise) and sharpness (share of
/// neighbor pairs across a hard edge, near zero for blur or flat fields).
#[derive(Debug, Clone)]
pub struct StructureIqa {
    /// Intensity step (units in [0,1]) that counts as a hard edge.
    pub edge_step: f64,
    /// Edge share at which sharpness saturates to ~63%.
    pub sharpness_scale: f64,
}

impl Default for StructureIqa {
    fn default() -> Self {
        StructureIqa {
            edge_step: 0.04,
            sharpness_scale: 0.03,
        }
    }
}

impl IqaModel for StructureIqa {
    fn id(&self) -> &str {
        "structure-iqa-v1"
    }

    fn score(&self, image: &RgbImage) -> Result<f64> {
        let (w, h) = image.dimensions();
        if w < 2 || h < 2 {
            return Err(Error::EmptyImage);
        }
        let gray = imageops::grayscale(image);
        let v = |x: u32, y: u32| gray.get_pixel(x, y)[0] as f64 / 255.0;
        let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut edges = 0.0;
        for y in 0..h {
            for x in 0..w {
                let a = v(x, y);
                let mut push = |b: f64| {
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                    n += 1.0;
                    if (a - b).abs() >= self.edge_step {
                        edges += 1.0;
                    }
                };
                if x + 1 < w {
                    push(v(x + 1, y));
                }
                if y + 1 < h {
                    push(v(x, y + 1));
                }
            }
        }
        let cov = sab / n - (sa / n) * (sb / n);
        let va = saa / n - (sa / n).powi(2);
        let vb = sbb / n - (sb / n).powi(2);
        if va <= 1e-12 || vb <= 1e-12 {
            return Ok(0.0);
        }
        // fourth power: resampled noise keeps some neighbor correlation
        let corr = (cov / (va * vb).sqrt()).clamp(0.0, 1.0).powi(4);
        let sharp = 1.0 - (-(edges / n) / self.sharpness_scale).exp();
        Ok((corr * sharp).clamp(0.0, 1.0))
    }
}
