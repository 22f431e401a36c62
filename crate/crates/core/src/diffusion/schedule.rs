use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 8.5e-5,
            beta_end: 1.2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear beta schedule with its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `betas[i] = beta_start + i * (beta_end - beta_start) / (T - 1)`.
    pub fn linear(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let step = if num_timesteps > 1 {
            (beta_end - beta_start) / (num_timesteps - 1) as f64
        } else {
            0.0
        };
        let betas: Vec<f64> = (0..num_timesteps)
            .map(|i| beta_start + i as f64 * step)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Invalid(format!(
                "timestep {t} outside [0, {})",
                self.num_timesteps()
            ))
        })
    }

    /// `alpha_bar / (1 - alpha_bar)`
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (1.0 - ab))
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`, with one timestep per batch row.
    pub fn q_sample(&self, x0: &Tensor, timesteps: &[usize], noise: &Tensor) -> Result<Tensor> {
        if x0.dims() != noise.dims() {
            return Err(Error::Shape("noise must match x0".into()));
        }
        let b = x0.dim(0)?;
        if timesteps.len() != b {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {b}",
                timesteps.len()
            )));
        }
        let abs = timesteps
            .iter()
            .map(|&t| self.alpha_bar(t))
            .collect::<Result<Vec<_>>>()?;
        let signal: Vec<f64> = abs.iter().map(|a| a.sqrt()).collect();
        let sigma: Vec<f64> = abs.iter().map(|a| (1.0 - a).sqrt()).collect();
        let per_row = |v: Vec<f64>| -> Result<Tensor> {
            let mut shape = vec![1; x0.rank()];
            shape[0] = b;
            Ok(Tensor::from_vec(v, shape, x0.device())?.to_dtype(x0.dtype())?)
        };
        let xs = x0.broadcast_mul(&per_row(signal)?)?;
        Ok(xs.add(&noise.broadcast_mul(&per_row(sigma)?)?)?)
    }
}
