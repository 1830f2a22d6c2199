//! Linear patch autoencoder: each 8x8 RGB patch maps to 4 latent channels
//! (luminance, two chroma axes, a luminance ramp). The basis is orthogonal
//! so encoding is the exact least-squares inverse of decoding.

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};

use crate::{Error, Result};

pub const LATENT_FACTOR: u32 = 8;
pub const LATENT_CHANNELS: usize = 4;
const PATCH: usize = (LATENT_FACTOR * LATENT_FACTOR * 3) as usize;

pub trait LatentAutoencoder: Send + Sync {
    fn id(&self) -> &str;
    /// `(h/8 * w/8, 4)` latent tokens in row-major patch order.
    fn encode(&self, image: &RgbImage, dtype: DType) -> Result<Tensor>;
    /// Differentiable decode to an `(h, w, 3)` tensor in [-1, 1].
    fn decode(&self, latent: &Tensor, grid: (usize, usize)) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct LinearAutoencoder {
    /// `PATCH x 4`, column c is the pixel pattern of latent channel c.
    basis: Vec<f64>,
}

impl Default for LinearAutoencoder {
    fn default() -> Self {
        let f = LATENT_FACTOR as usize;
        let mut basis = vec![0f64; PATCH * LATENT_CHANNELS];
        for py in 0..f {
            for px in 0..f {
                let ramp = ((px as f64 - 3.5) + (py as f64 - 3.5)) / 8.0;
                for c in 0..3 {
                    let p = (py * f + px) * 3 + c;
                    basis[p * 4] = 0.5;
                    basis[p * 4 + 1] = [0.5, 0.0, -0.5][c];
                    basis[p * 4 + 2] = [-0.25, 0.5, -0.25][c];
                    basis[p * 4 + 3] = ramp;
                }
            }
        }
        LinearAutoencoder { basis }
    }
}

impl LinearAutoencoder {
    fn basis_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.basis.clone(), (PATCH, LATENT_CHANNELS), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }

    fn column_norms(&self) -> [f64; LATENT_CHANNELS] {
        let mut n = [0f64; LATENT_CHANNELS];
        for p in 0..PATCH {
            for (c, slot) in n.iter_mut().enumerate() {
                *slot += self.basis[p * 4 + c].powi(2);
            }
        }
        n
    }
}

impl LatentAutoencoder for LinearAutoencoder {
    fn id(&self) -> &str {
        "linear-ae-v1"
    }

    fn encode(&self, image: &RgbImage, dtype: DType) -> Result<Tensor> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 || w % LATENT_FACTOR != 0 || h % LATENT_FACTOR != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {w}x{h} is not a positive multiple of {LATENT_FACTOR}"
            )));
        }
        let f = LATENT_FACTOR as usize;
        let (gw, gh) = (w as usize / f, h as usize / f);
        let norms = self.column_norms();
        let mut z = vec![0f64; gw * gh * LATENT_CHANNELS];
        for gy in 0..gh {
            for gx in 0..gw {
                let cell = gy * gw + gx;
                for py in 0..f {
                    for px in 0..f {
                        let pix = image.get_pixel((gx * f + px) as u32, (gy * f + py) as u32);
                        for c in 0..3 {
                            let v = pix[c] as f64 / 127.5 - 1.0;
                            let p = (py * f + px) * 3 + c;
                            for k in 0..LATENT_CHANNELS {
                                z[cell * 4 + k] += v * self.basis[p * 4 + k];
                            }
                        }
                    }
                }
                for k in 0..LATENT_CHANNELS {
                    z[cell * 4 + k] /= norms[k];
                }
            }
        }
        Ok(Tensor::from_vec(z, (gw * gh, LATENT_CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
    }

    fn decode(&self, latent: &Tensor, (gh, gw): (usize, usize)) -> Result<Tensor> {
        let f = LATENT_FACTOR as usize;
        let basis = self.basis_tensor(latent.dtype())?;
        let patches = latent.matmul(&basis.t()?)?;
        Ok(patches
            .reshape((gh, gw, f, f, 3))?
            .permute((0, 2, 1, 3, 4))?
            .reshape((gh * f, gw * f, 3))?)
    }
}

/// `(h, w, 3)` tensor in [-1, 1] to 8-bit pixels (rounded, clamped).
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (h, w, c) = t.dims3()?;
    if c != 3 {
        return Err(Error::DimensionMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        Rgb([0, 1, 2].map(|k| ((v[i + k] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
    }))
}

/// 8-bit pixels to an `(h, w, 3)` tensor in [-1, 1].
pub fn image_to_tensor(image: &RgbImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let v: Vec<f32> = image
        .as_raw()
        .iter()
        .map(|p| *p as f32 / 127.5 - 1.0)
        .collect();
    Ok(Tensor::from_vec(v, (h as usize, w as usize, 3), &Device::Cpu)?.to_dtype(dtype)?)
}
