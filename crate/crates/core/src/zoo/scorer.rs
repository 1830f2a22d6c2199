//! Image-caption alignment scorers (reward and preference stand-ins).

use candle_core::{DType, Device, Tensor};
use image::{imageops, RgbImage};

use super::autoencoder::image_to_tensor;
use super::dense::{gaussian64, mix_seed};
use super::text::{TextEncoder, TinyTextEncoder};
use crate::Result;

const GRID: usize = 8;
const POOLED: usize = GRID * GRID * 3;

pub trait AlignmentScorer: Send + Sync {
    fn id(&self) -> &str;

    /// Differentiable score of an `(h, w, 3)` image tensor in [-1, 1];
    /// `h` and `w` must be multiples of 8.
    fn score_tensor(&self, image: &Tensor, caption: &str) -> Result<Tensor>;

    fn score(&self, image: &RgbImage, caption: &str) -> Result<f64> {
        let (w, h) = image.dimensions();
        let t = if w % 8 == 0 && h % 8 == 0 && w > 0 && h > 0 {
            image_to_tensor(image, DType::F64)?
        } else {
            image_to_tensor(
                &imageops::resize(image, 64, 64, imageops::FilterType::Triangle),
                DType::F64,
            )?
        };
        Ok(self
            .score_tensor(&t, caption)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?)
    }
}

/// Cosine between a tanh projection of the 8x8-pooled image and the mean
/// hidden state of a private text tower.
#[derive(Debug, Clone)]
pub struct TinyAlignmentScorer {
    id: String,
    text: TinyTextEncoder,
    embed: usize,
    img_proj: Vec<f64>,
    txt_proj: Vec<f64>,
}

impl TinyAlignmentScorer {
    pub fn new(id: &str, seed: u64) -> Self {
        let text = TinyTextEncoder::new(&format!("{id}/text"), mix_seed(seed, 100), 32);
        let embed = 32;
        TinyAlignmentScorer {
            id: id.to_string(),
            img_proj: gaussian64(
                mix_seed(seed, 101),
                embed * POOLED,
                2.0 / (POOLED as f64).sqrt(),
            ),
            txt_proj: gaussian64(
                mix_seed(seed, 102),
                embed * text.width(),
                1.0 / (text.width() as f64).sqrt(),
            ),
            text,
            embed,
        }
    }

    fn text_feature(&self, caption: &str) -> Result<Vec<f64>> {
        let tok = self.text.tokenizer();
        let mut ids = vec![tok.bos_id()];
        ids.extend(
            tok.tokenize(caption)
                .iter()
                .map(|t| t.id)
                .take(tok.context_length() - 2),
        );
        ids.push(tok.eos_id());
        let h = self.text.encode_ids(&ids)?;
        let d = self.text.width();
        let m = ids.len();
        let pooled: Vec<f64> = (0..d)
            .map(|j| (0..m).map(|i| h[i * d + j] as f64).sum::<f64>() / m as f64)
            .collect();
        Ok((0..self.embed)
            .map(|o| (0..d).map(|j| self.txt_proj[o * d + j] * pooled[j]).sum())
            .collect())
    }
}

impl AlignmentScorer for TinyAlignmentScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score_tensor(&self, image: &Tensor, caption: &str) -> Result<Tensor> {
        let (h, w, _) = image.dims3()?;
        let dtype = image.dtype();
        let pooled = image
            .reshape((GRID, h / GRID, GRID, w / GRID, 3))?
            .mean(3)?
            .mean(1)?
            .reshape((POOLED, 1))?;
        let p = Tensor::from_vec(self.img_proj.clone(), (self.embed, POOLED), &Device::Cpu)?
            .to_dtype(dtype)?;
        let a = p.matmul(&pooled)?.tanh()?.flatten_all()?;
        let b = Tensor::from_vec(self.text_feature(caption)?, self.embed, &Device::Cpu)?
            .to_dtype(dtype)?;
        let dot = (&a * &b)?.sum_all()?;
        let na = a.sqr()?.sum_all()?.sqrt()?;
        let nb = b.sqr()?.sum_all()?.sqrt()?;
        Ok(dot.div(&((na * nb)? + 1e-12)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_in_range_and_deterministic() {
        let s = TinyAlignmentScorer::new("r", 5);
        let img = crate::synthetic::natural_image(64, 64, 1);
        let a = s.score(&img, "a tiger in the grass").unwrap();
        assert!((-1.0..=1.0).contains(&a));
        assert_eq!(a, s.score(&img, "a tiger in the grass").unwrap());
        assert_ne!(a, s.score(&img, "parliament debate").unwrap());
        let odd = crate::synthetic::natural_image(50, 30, 1);
        assert!(s.score(&odd, "x").unwrap().is_finite());
    }
}
