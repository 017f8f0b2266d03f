use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::unet::Denoiser;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub image_scale: f64,
    pub text_scale: f64,
    /// Blend toward the std-rescaled estimate, in `[0, 1]`.
    pub rescale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            image_scale: 1.5,
            text_scale: 7.5,
            rescale: 0.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rescale) {
            return Err(Error::Config(format!(
                "guidance rescale must lie in [0, 1], got {}",
                self.rescale
            )));
        }
        if !self.image_scale.is_finite() || !self.text_scale.is_finite() {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        Ok(())
    }
}

/// Per-sample population std over all but the batch axis.
fn per_sample_std(x: &Tensor) -> Result<Vec<f64>> {
    let b = x.dims()[0];
    let rows = x.to_dtype(DType::F64)?.reshape((b, ()))?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            (r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        })
        .collect())
}

/// Two-condition classifier-free guidance:
///
/// `ε̂ = ε(∅,∅) + s_I·(ε(c_I,∅) − ε(∅,∅)) + s_T·(ε(c_I,h) − ε(c_I,∅))`
///
/// followed by `φ·ε̂·σ(ε(c_I,h))/σ(ε̂) + (1 − φ)·ε̂` per sample. Samples
/// with `σ(ε̂) = 0` skip the rescale.
pub fn combine_guidance(
    uncond: &Tensor,
    image_only: &Tensor,
    full: &Tensor,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if uncond.dims() != full.dims() || image_only.dims() != full.dims() {
        return Err(Error::Config("guidance branches differ in shape".into()));
    }
    let guided = (uncond
        + (image_only - uncond)?.affine(cfg.image_scale, 0.0)?
        + (full - image_only)?.affine(cfg.text_scale, 0.0)?)?;
    if cfg.rescale == 0.0 {
        return Ok(guided);
    }
    let s_cond = per_sample_std(full)?;
    let s_guided = per_sample_std(&guided)?;
    let factors: Vec<f64> = s_cond
        .iter()
        .zip(&s_guided)
        .map(|(c, g)| {
            if *g == 0.0 {
                1.0
            } else {
                cfg.rescale * (c / g) + (1.0 - cfg.rescale)
            }
        })
        .collect();
    let mut shape = vec![1usize; full.rank()];
    shape[0] = factors.len();
    let f = Tensor::from_vec(factors, shape, full.device())?.to_dtype(full.dtype())?;
    Ok(guided.broadcast_mul(&f)?)
}

/// Runs the three guidance branches in one batched call and combines them.
///
/// `context`/`null_context`: `[B, L, D]`; `image_cond`: `[B, C, H, W]`.
pub fn cfg_predict(
    denoiser: &dyn Denoiser,
    z_t: &Tensor,
    t: usize,
    context: &Tensor,
    null_context: &Tensor,
    image_cond: &Tensor,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    let b = z_t.dims()[0];
    let zeros = image_cond.zeros_like()?;
    let z3 = Tensor::cat(&[z_t, z_t, z_t], 0)?;
    let ctx3 = Tensor::cat(&[null_context, null_context, context], 0)?;
    let img3 = Tensor::cat(&[&zeros, image_cond, image_cond], 0)?;
    let eps = denoiser.predict_noise(&z3, &vec![t; 3 * b], &ctx3, &img3)?;
    let uncond = eps.narrow(0, 0, b)?;
    let image_only = eps.narrow(0, b, b)?;
    let full = eps.narrow(0, 2 * b, b)?;
    combine_guidance(&uncond, &image_only, &full, cfg)
}
