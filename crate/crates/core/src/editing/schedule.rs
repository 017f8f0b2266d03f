use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 50,
        }
    }
}

/// Discrete diffusion schedule holding the cumulative signal coefficients
/// `ᾱ_t`, strictly decreasing in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly between `beta_start` and `beta_end`.
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.num_train_steps;
        if n == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let mut acc = 1.0;
        let alpha_bars = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                let beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { alpha_bars })
    }

    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        if alpha_bars.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("ᾱ values must lie in (0, 1]".into()));
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("ᾱ must be strictly decreasing in t".into()));
        }
        Ok(Self { alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Timestep {
            t,
            num_steps: self.num_steps(),
        })
    }

    /// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·ε`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let a = self.alpha_bar(t)?;
        Ok((z0.affine(a.sqrt(), 0.0)? + eps.affine((1.0 - a).sqrt(), 0.0)?)?)
    }

    /// Batched [`NoiseSchedule::add_noise`] with one timestep per sample.
    pub fn add_noise_batch(&self, z0: &Tensor, timesteps: &[usize], eps: &Tensor) -> Result<Tensor> {
        let (signal, noise) = self.coefficients(timesteps, z0.rank(), z0.dtype(), z0.device())?;
        Ok((z0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
    }

    /// `x̂0 = (z_t − sqrt(1 − ᾱ_t)·ε) / sqrt(ᾱ_t)`.
    pub fn predict_x0(&self, z_t: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let a = self.alpha_bar(t)?;
        Ok((z_t - eps.affine((1.0 - a).sqrt(), 0.0)?)?.affine(1.0 / a.sqrt(), 0.0)?)
    }

    /// Per-sample `sqrt(ᾱ)` and `sqrt(1 − ᾱ)` shaped `[B, 1, ...]`.
    fn coefficients(
        &self,
        timesteps: &[usize],
        rank: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        let mut shape = vec![timesteps.len()];
        shape.extend(std::iter::repeat_n(1, rank.saturating_sub(1)));
        let mut s = Vec::with_capacity(timesteps.len());
        let mut n = Vec::with_capacity(timesteps.len());
        for t in timesteps {
            let a = self.alpha_bar(*t)?;
            s.push(a.sqrt());
            n.push((1.0 - a).sqrt());
        }
        let s = Tensor::from_vec(s, shape.as_slice(), device)?.to_dtype(dtype)?;
        let n = Tensor::from_vec(n, shape.as_slice(), device)?.to_dtype(dtype)?;
        Ok((s, n))
    }

    /// Evenly spaced timesteps for sampling, descending and ending at the
    /// noisiest step first (`T − 1`).
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.num_steps();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!(
                "sampling steps must be in 1..={t}, got {steps}"
            )));
        }
        let ratio = t as f64 / steps as f64;
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| ((t as f64 - i as f64 * ratio).round() as usize).saturating_sub(1))
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// A latent with the timestep it was noised to.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        schedule.alpha_bar(t)?;
        let finite = z
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("latent contains non-finite values".into()));
        }
        Ok(Self { z, t })
    }
}
