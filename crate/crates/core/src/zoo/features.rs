use image::{imageops, RgbImage};

use super::dense::gaussian64;
use crate::Result;

/// Joint-embedding-style image features for Fréchet statistics.
pub trait ImageFeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// 4x4 color pooling of a 32x32 thumbnail, projected and squashed.
#[derive(Debug, Clone)]
pub struct TinyImageFeatures {
    dim: usize,
    proj: Vec<f64>,
}

const POOLED: usize = 4 * 4 * 3;

impl TinyImageFeatures {
    pub fn new(seed: u64, dim: usize) -> Self {
        TinyImageFeatures {
            dim,
            proj: gaussian64(seed, dim * POOLED, 2.0 / (POOLED as f64).sqrt()),
        }
    }
}

impl Default for TinyImageFeatures {
    fn default() -> Self {
        TinyImageFeatures::new(0x05af_ef1d, 8)
    }
}

impl ImageFeatureExtractor for TinyImageFeatures {
    fn id(&self) -> &str {
        "tiny-clip-vision-v1"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(crate::Error::EmptyImage);
        }
        let thumb = imageops::resize(image, 32, 32, imageops::FilterType::Triangle);
        let mut pooled = vec![0f64; POOLED];
        for (x, y, p) in thumb.enumerate_pixels() {
            let cell = ((y / 8) * 4 + x / 8) as usize;
            for c in 0..3 {
                pooled[cell * 3 + c] += (p[c] as f64 / 127.5 - 1.0) / 64.0;
            }
        }
        Ok((0..self.dim)
            .map(|o| {
                (0..POOLED)
                    .map(|j| self.proj[o * POOLED + j] * pooled[j])
                    .sum::<f64>()
                    .tanh()
            })
            .collect())
    }
}
