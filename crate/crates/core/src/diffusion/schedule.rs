use candle_core::Tensor;

use crate::{Error, Result};

/// Length of the underlying training beta schedule.
pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;
pub const DEFAULT_TIMESTEPS: usize = 100;

/// Discrete noise schedule with `timesteps` levels. Level `t` sits at
/// training step `t * stride` of a scaled-linear beta schedule and
/// `alpha_bar(t) = prod_{s < t*stride} (1 - beta_s)`, so `t = 0` is noise-free.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(timesteps: usize) -> Result<Self> {
        if timesteps == 0 || !TRAIN_STEPS.is_multiple_of(timesteps) {
            return Err(Error::InvalidArgument(format!(
                "timesteps must divide {TRAIN_STEPS}, got {timesteps}"
            )));
        }
        let stride = TRAIN_STEPS / timesteps;
        let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut cumulative = Vec::with_capacity(TRAIN_STEPS + 1);
        let mut acc = 1.0f64;
        cumulative.push(acc);
        for i in 0..TRAIN_STEPS {
            let beta = (s0 + (s1 - s0) * i as f64 / (TRAIN_STEPS - 1) as f64).powi(2);
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let alpha_bar = (0..timesteps).map(|t| cumulative[t * stride]).collect();
        Ok(NoiseSchedule {
            timesteps,
            alpha_bar,
        })
    }

    pub fn id(&self) -> String {
        format!("ddim-scaled-linear-{}", self.timesteps)
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at level `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    pub fn add_noise(&self, clean: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        let (a, b) = self.coefficients(t);
        Ok(((clean * a)? + (noise * b)?)?)
    }

    /// Clean-sample estimate from a noise prediction.
    pub fn predict_clean(&self, noisy: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let (a, b) = self.coefficients(t);
        Ok(((noisy - (eps * b)?)? / a)?)
    }

    /// Descending levels visited by an `n`-step sampler ("leading" spacing).
    pub fn inference_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.timesteps {
            return Err(Error::InvalidArgument(format!(
                "steps must be in 1..={}, got {n}",
                self.timesteps
            )));
        }
        Ok((0..n).rev().map(|i| i * self.timesteps / n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::new(100).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.coefficients(0), (1.0, 0.0));
        assert!(s.table().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(99) < 0.01 && s.alpha_bar(99) > 0.0);
        assert_eq!(s.inference_timesteps(100).unwrap().len(), 100);
        assert_eq!(s.inference_timesteps(4).unwrap(), vec![75, 50, 25, 0]);
        assert!(NoiseSchedule::new(7).is_err());
    }
}
