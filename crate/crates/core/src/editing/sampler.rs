use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::guidance::{cfg_predict, GuidanceConfig};
use super::schedule::NoiseSchedule;
use super::unet::Denoiser;
use crate::error::{Error, Result};

/// Seeded standard-normal tensor.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Deterministic DDIM from pure noise to a clean latent.
///
/// `image_cond`: `[B, C, H, W]`, the encoded input image; `context` and
/// `null_context`: `[B, L, D]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_latent(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    image_cond: &Tensor,
    context: &Tensor,
    null_context: &Tensor,
    guidance: &GuidanceConfig,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian(image_cond.dims(), &mut rng, image_cond.dtype())?;
    ddim_from(denoiser, schedule, noise, image_cond, context, null_context, guidance, steps)
}

#[allow(clippy::too_many_arguments)]
pub fn ddim_from(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    mut z: Tensor,
    image_cond: &Tensor,
    context: &Tensor,
    null_context: &Tensor,
    guidance: &GuidanceConfig,
    steps: usize,
) -> Result<Tensor> {
    let ts = schedule.sampling_timesteps(steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let eps = cfg_predict(denoiser, &z, t, context, null_context, image_cond, guidance)?;
        let x0 = schedule.predict_x0(&z, t, &eps)?;
        let a_prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        z = (x0.affine(a_prev.sqrt(), 0.0)? + eps.affine((1.0 - a_prev).sqrt(), 0.0)?)?;
    }
    let finite = z
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numeric("sampler produced non-finite latent".into()));
    }
    Ok(z)
}
