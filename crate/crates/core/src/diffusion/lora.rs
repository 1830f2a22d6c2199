use candle_core::{DType, Device, Tensor, Var};

use crate::zoo::dense::gaussian64;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    SelfAttention,
    CrossAttention,
    Other,
}

impl SiteKind {
    pub fn is_attention(self) -> bool {
        !matches!(self, SiteKind::Other)
    }
}

/// Low-rank update `scale * B·A` on a frozen `out x in` weight.
#[derive(Debug, Clone)]
pub struct Adapter {
    /// `rank x in`.
    pub a: Var,
    /// `out x rank`, zero at attach time.
    pub b: Var,
    pub scale: f64,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }
}

/// Bias-free linear map with an optional adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub kind: SiteKind,
    /// `out x in`.
    pub weight: Tensor,
    pub adapter: Option<Adapter>,
}

impl Linear {
    pub fn new(
        name: &str,
        kind: SiteKind,
        out: usize,
        inp: usize,
        std: f64,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let weight = Tensor::from_vec(gaussian64(seed, out * inp, std), (out, inp), &Device::Cpu)?
            .to_dtype(dtype)?;
        Ok(Linear {
            name: name.to_string(),
            kind,
            weight,
            adapter: None,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `x (n x in) -> (n x out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.adapter {
            None => Ok(y),
            Some(ad) => {
                let low = x
                    .matmul(&ad.a.as_tensor().t()?)?
                    .matmul(&ad.b.as_tensor().t()?)?;
                Ok((y + (low * ad.scale)?)?)
            }
        }
    }

    pub fn attach(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let limit = out.min(inp);
        if rank == 0 || rank >= limit {
            return Err(Error::RankTooLarge {
                site: self.name.clone(),
                rank,
                limit,
            });
        }
        let dtype = self.weight.dtype();
        let a = Tensor::from_vec(
            gaussian64(seed, rank * inp, 1.0 / (inp as f64).sqrt()),
            (rank, inp),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        let b = Tensor::zeros((out, rank), dtype, &Device::Cpu)?;
        self.adapter = Some(Adapter {
            a: Var::from_tensor(&a)?,
            b: Var::from_tensor(&b)?,
            scale: alpha / rank as f64,
        });
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Linear> {
        let adapter = match &self.adapter {
            None => None,
            Some(ad) => Some(Adapter {
                a: Var::from_tensor(&ad.a.as_tensor().to_dtype(dtype)?)?,
                b: Var::from_tensor(&ad.b.as_tensor().to_dtype(dtype)?)?,
                scale: ad.scale,
            }),
        };
        Ok(Linear {
            name: self.name.clone(),
            kind: self.kind,
            weight: self.weight.to_dtype(dtype)?,
            adapter,
        })
    }
}
