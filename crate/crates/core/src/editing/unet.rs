//! A small conditional denoiser with the usual latent-diffusion wiring:
//! the image condition is concatenated to the noisy latent on the channel
//! axis, the instruction enters through cross-attention, and the timestep
//! through a sinusoidal embedding added to the feature maps.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Weights};
use crate::error::{Error, Result};

/// `ε_θ(z_t, t, h, E(c_I))`.
pub trait Denoiser: Send + Sync {
    /// `z_t`, `image_cond`: `[B, C, H, W]`; `context`: `[B, L, D]`.
    fn predict_noise(
        &self,
        z_t: &Tensor,
        timesteps: &[usize],
        context: &Tensor,
        image_cond: &Tensor,
    ) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub channels: usize,
    pub attn_dim: usize,
    pub context_dim: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
}

impl UNetConfig {
    pub fn toy(context_dim: usize) -> Self {
        Self {
            latent_channels: 3,
            channels: 32,
            attn_dim: 32,
            context_dim,
            time_dim: 32,
            time_hidden: 64,
        }
    }

    /// Names and shapes of every denoiser parameter.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let lc = self.latent_channels;
        let a = self.attn_dim;
        let d = self.context_dim;
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("time.l1.w".into(), vec![self.time_hidden, self.time_dim]),
            ("time.l1.b".into(), vec![self.time_hidden]),
            ("time.l2.w".into(), vec![c, self.time_hidden]),
            ("time.l2.b".into(), vec![c]),
            ("enc.conv_in.w".into(), vec![c, 2 * lc, 3, 3]),
            ("enc.conv_in.b".into(), vec![c]),
            ("enc.res.w".into(), vec![c, c, 3, 3]),
            ("enc.res.b".into(), vec![c]),
            ("enc.mid.w".into(), vec![c, c, 3, 3]),
            ("enc.mid.b".into(), vec![c]),
            ("dec.conv.w".into(), vec![c, 2 * c, 3, 3]),
            ("dec.conv.b".into(), vec![c]),
            ("dec.conv_out.w".into(), vec![lc, c, 3, 3]),
            ("dec.conv_out.b".into(), vec![lc]),
        ];
        for block in ["enc.attn", "dec.attn"] {
            v.push((format!("{block}.q.w"), vec![a, c]));
            v.push((format!("{block}.k.w"), vec![a, d]));
            v.push((format!("{block}.v.w"), vec![a, d]));
            v.push((format!("{block}.o.w"), vec![c, a]));
        }
        v
    }

    /// Adds freshly initialised denoiser parameters to `store`: weights
    /// `N(0, 1/fan_in)`, biases zero.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape) in self.param_shapes() {
            if name.ends_with(".b") {
                store.insert_zeros(&name, &shape)?;
            } else {
                let fan_in: usize = shape[1..].iter().product();
                store.insert_normal(&name, &shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)?;
            }
        }
        Ok(())
    }
}

/// `[sin(t·f_0..f_{n-1}), cos(t·f_0..f_{n-1})]` with
/// `f_i = exp(−ln(10000)·i/n)`, `n = dim/2`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        v.extend(args.iter().map(|a| a.sin()));
        v.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(v, (timesteps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

pub struct ToyUNet {
    cfg: UNetConfig,
    w: Weights,
}

impl ToyUNet {
    pub fn new(cfg: UNetConfig, weights: Weights) -> Self {
        Self { cfg, w: weights }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.w.get(&format!("{name}.w"))?;
        let y = x.broadcast_matmul(&w.t()?)?;
        match self.w.get(&format!("{name}.b")) {
            Ok(b) => Ok(y.broadcast_add(b)?),
            Err(_) => Ok(y),
        }
    }

    fn conv(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.w.get(&format!("{name}.w"))?;
        let b = self.w.get(&format!("{name}.b"))?;
        let y = x.conv2d(w, 1, 1, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?)
    }

    /// Single-head cross-attention from feature map pixels to context tokens.
    fn cross_attention(&self, x: &Tensor, ctx: &Tensor, name: &str) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?; // [B, HW, C]
        let q = self.linear(&tokens, &format!("{name}.q"))?;
        let k = self.linear(ctx, &format!("{name}.k"))?;
        let v = self.linear(ctx, &format!("{name}.v"))?;
        let scale = 1.0 / (self.cfg.attn_dim as f64).sqrt();
        let scores = q.matmul(&k.transpose(1, 2)?.contiguous()?)?.affine(scale, 0.0)?;
        let attn = candle_nn::ops::softmax(&scores, candle_core::D::Minus1)?;
        let out = attn.matmul(&v)?;
        let out = self.linear(&out, &format!("{name}.o"))?; // [B, HW, C]
        Ok(out.transpose(1, 2)?.reshape((b, c, h, w))?)
    }

    fn check_inputs(&self, z_t: &Tensor, timesteps: &[usize], ctx: &Tensor, cond: &Tensor) -> Result<()> {
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Config(format!(
                "latent has {c} channels, denoiser expects {}",
                self.cfg.latent_channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("latent size {h}x{w} must be even")));
        }
        if cond.dims() != z_t.dims() {
            return Err(Error::Config(format!(
                "image condition {:?} does not match latent {:?}",
                cond.dims(),
                z_t.dims()
            )));
        }
        let (cb, _, cd) = ctx.dims3()?;
        if cb != b || cd != self.cfg.context_dim {
            return Err(Error::Config(format!(
                "context {:?} does not match batch {b} / dim {}",
                ctx.dims(),
                self.cfg.context_dim
            )));
        }
        if timesteps.len() != b {
            return Err(Error::Config(format!(
                "{} timesteps for a batch of {b}",
                timesteps.len()
            )));
        }
        Ok(())
    }
}

impl Denoiser for ToyUNet {
    fn predict_noise(
        &self,
        z_t: &Tensor,
        timesteps: &[usize],
        context: &Tensor,
        image_cond: &Tensor,
    ) -> Result<Tensor> {
        self.check_inputs(z_t, timesteps, context, image_cond)?;
        let dtype = self.w.get("enc.conv_in.w")?.dtype();
        let z_t = z_t.to_dtype(dtype)?;
        let cond = image_cond.to_dtype(dtype)?;
        let ctx = context.to_dtype(dtype)?;
        let c = self.cfg.channels;

        let temb = timestep_embedding(timesteps, self.cfg.time_dim, dtype)?;
        let temb = self.linear(&self.linear(&temb, "time.l1")?.silu()?, "time.l2")?;
        let temb = temb.reshape((timesteps.len(), c, 1, 1))?;

        let x = Tensor::cat(&[&z_t, &cond], 1)?;
        let h0 = self.conv(&x, "enc.conv_in")?;
        let h1 = (&h0 + self.conv(&h0.broadcast_add(&temb)?.silu()?, "enc.res")?)?;

        let p = h1.avg_pool2d(2)?;
        let m = (&p + self.conv(&p, "enc.mid")?.broadcast_add(&temb)?.silu()?)?;
        let m = (&m + self.cross_attention(&m, &ctx, "enc.attn")?)?;

        let (_, _, hh, ww) = h1.dims4()?;
        let u = m.upsample_nearest2d(hh, ww)?;
        let d = self.conv(&Tensor::cat(&[&u, &h1], 1)?, "dec.conv")?.silu()?;
        let d = (&d + self.cross_attention(&d, &ctx, "dec.attn")?)?;
        self.conv(&d, "dec.conv_out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editing::params::Trainable;

    fn net(dtype: DType) -> (UNetConfig, ParamStore) {
        let cfg = UNetConfig {
            latent_channels: 3,
            channels: 8,
            attn_dim: 4,
            context_dim: 6,
            time_dim: 8,
            time_hidden: 8,
        };
        let mut s = ParamStore::new(dtype);
        cfg.init_params(&mut s, 0).unwrap();
        (cfg, s)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn output_shape_matches_latent() {
        let (cfg, s) = net(DType::F32);
        let u = ToyUNet::new(cfg, s.weights(&Trainable::None, None).unwrap());
        let z = rand(&[2, 3, 8, 8], 1);
        let out = u
            .predict_noise(&z, &[5, 900], &rand(&[2, 4, 6], 2), &rand(&[2, 3, 8, 8], 3))
            .unwrap();
        assert_eq!(out.dims(), &[2, 3, 8, 8]);
    }

    #[test]
    fn conditions_change_the_prediction() {
        let (cfg, s) = net(DType::F64);
        let u = ToyUNet::new(cfg, s.weights(&Trainable::None, None).unwrap());
        let z = rand(&[1, 3, 4, 4], 1);
        let ctx = rand(&[1, 5, 6], 2);
        let img = rand(&[1, 3, 4, 4], 3);
        let base = u.predict_noise(&z, &[10], &ctx, &img).unwrap();
        let diff = |o: Tensor| {
            (o - &base).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        assert!(diff(u.predict_noise(&z, &[11], &ctx, &img).unwrap()) > 0.0);
        assert!(diff(u.predict_noise(&z, &[10], &rand(&[1, 5, 6], 9), &img).unwrap()) > 0.0);
        assert!(diff(u.predict_noise(&z, &[10], &ctx, &rand(&[1, 3, 4, 4], 9)).unwrap()) > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, s) = net(DType::F32);
        let u = ToyUNet::new(cfg, s.weights(&Trainable::None, None).unwrap());
        let z = rand(&[1, 3, 4, 4], 1);
        let ctx = rand(&[1, 5, 6], 2);
        assert!(u.predict_noise(&z, &[1], &ctx, &rand(&[1, 3, 2, 2], 0)).is_err());
        assert!(u.predict_noise(&z, &[1, 2], &ctx, &z).is_err());
        assert!(u.predict_noise(&rand(&[1, 3, 5, 5], 1), &[1], &ctx, &rand(&[1, 3, 5, 5], 1)).is_err());
        assert!(u.predict_noise(&z, &[1], &rand(&[1, 5, 7], 2), &z).is_err());
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(&[0, 3], 4, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(e[0], vec![0.0, 0.0, 1.0, 1.0]);
        let f1 = (-(10000f64.ln()) / 2.0).exp();
        assert!((e[1][1] - (3.0 * f1).sin()).abs() < 1e-15);
        assert!((e[1][2] - 3f64.cos()).abs() < 1e-15);
    }
}
