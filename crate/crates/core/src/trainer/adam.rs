use candle_core::{Tensor, Var};

use crate::Result;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for an ordered parameter list. Kept as plain tensors so they
/// can be checkpointed and restored exactly.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Var]) -> Result<Self> {
        let zeros = |p: &&Var| p.as_tensor().zeros_like();
        Ok(AdamState {
            step: 0,
            m: params
                .iter()
                .map(zeros)
                .collect::<candle_core::Result<_>>()?,
            v: params
                .iter()
                .map(zeros)
                .collect::<candle_core::Result<_>>()?,
        })
    }

    /// One bias-corrected update; a missing gradient counts as zero.
    pub fn update(&mut self, params: &[&Var], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => p.as_tensor().zeros_like()?,
            };
            self.m[i] = ((&self.m[i] * BETA1)? + (&g * (1.0 - BETA1))?)?;
            self.v[i] = ((&self.v[i] * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
            let m_hat = (&self.m[i] / c1)?;
            let v_hat = (&self.v[i] / c2)?;
            let step = ((m_hat / (v_hat.sqrt()? + EPSILON)?)? * lr)?;
            p.set(&(p.as_tensor() - step)?)?;
        }
        Ok(())
    }
}
