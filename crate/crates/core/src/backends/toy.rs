//! Deterministic stand-ins for the pretrained encoders.
//!
//! Text embeddings are token-local (a seeded hash of the token), image
//! patch features are patch-local (a seeded random projection of the patch
//! pixels), so span-level behaviour in the instruction encoder can be
//! checked exactly.

use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendKind, BackendProfile, ImageEncoder, T2IClient, TextEncoder, VaeBackend,
    IMAGE_PLACEHOLDER,
};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const PAD_ID: u32 = 0;
pub const PLACEHOLDER_ID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub hidden_dim: usize,
    pub max_length: usize,
    pub grid: usize,
    /// Patch edge in pixels; images are resized to `grid * patch`.
    pub patch: usize,
    pub patch_dim: usize,
    pub vae_factor: usize,
    /// Edge of images emitted by the stub text-to-image client.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            max_length: 77,
            grid: 14,
            patch: 16,
            patch_dim: 16,
            vae_factor: 1,
            image_size: 16,
            seed: 0,
        }
    }
}

/// 64-bit seed derived from a domain tag and arbitrary bytes.
pub(crate) fn derive_seed(seed: u64, domain: &str, bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(bytes);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn normal_vec(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<image>|<style>|[A-Za-z0-9]+|[^\sA-Za-z0-9]").expect("static regex")
    })
}

pub struct ToyTextEncoder {
    profile: BackendProfile,
}

impl ToyTextEncoder {
    pub fn new(cfg: &ToyConfig) -> Self {
        Self {
            profile: BackendProfile {
                kind: BackendKind::Toy,
                name: "toy-text".into(),
                hidden_dim: cfg.hidden_dim,
                joint_dim: cfg.hidden_dim,
                context_limit: cfg.max_length,
                patch_grid: cfg.grid,
                patch_dim: cfg.patch_dim,
                seed: Some(cfg.seed),
            },
        }
    }

    fn seed(&self) -> u64 {
        self.profile.seed.unwrap_or(0)
    }

    fn token_id(token: &str) -> u32 {
        if token == IMAGE_PLACEHOLDER {
            return PLACEHOLDER_ID;
        }
        let h = derive_seed(0, "token", token.to_lowercase().as_bytes());
        2 + (h % (u32::MAX as u64 - 2)) as u32
    }

    fn token_embedding(&self, id: u32) -> Vec<f32> {
        normal_vec(
            derive_seed(self.seed(), "embed", &id.to_le_bytes()),
            self.profile.hidden_dim,
        )
    }
}

impl TextEncoder for ToyTextEncoder {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        Ok(token_regex()
            .find_iter(text)
            .map(|m| Self::token_id(m.as_str()))
            .collect())
    }

    fn placeholder_id(&self) -> u32 {
        PLACEHOLDER_ID
    }

    fn pad_id(&self) -> u32 {
        PAD_ID
    }

    fn hidden_states(&self, ids: &[u32]) -> Result<Tensor> {
        let d = self.profile.hidden_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            data.extend(self.token_embedding(*id));
        }
        Ok(Tensor::from_vec(data, (ids.len(), d), &Device::Cpu)?)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let ids = self.tokenize(text)?;
        let d = self.profile.hidden_dim;
        let mut acc = vec![0f32; d];
        for id in &ids {
            for (a, v) in acc.iter_mut().zip(self.token_embedding(*id)) {
                *a += v;
            }
        }
        if !ids.is_empty() {
            let n = ids.len() as f32;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        Ok(acc)
    }
}

pub struct ToyImageEncoder {
    profile: BackendProfile,
    patch: usize,
    /// `[patch_dim, 3 * patch * patch]`, row-major.
    projection: Vec<f32>,
    /// `[joint_dim, patch_dim]`, row-major.
    pooling: Vec<f32>,
}

impl ToyImageEncoder {
    pub fn new(cfg: &ToyConfig) -> Self {
        let fan_in = CHANNELS * cfg.patch * cfg.patch;
        let scale = 1.0 / (fan_in as f32).sqrt();
        let projection = normal_vec(derive_seed(cfg.seed, "patch-proj", &[]), cfg.patch_dim * fan_in)
            .into_iter()
            .map(|v| v * scale * 2.0)
            .collect();
        let pscale = 1.0 / (cfg.patch_dim as f32).sqrt();
        let pooling = normal_vec(
            derive_seed(cfg.seed, "pool-proj", &[]),
            cfg.hidden_dim * cfg.patch_dim,
        )
        .into_iter()
        .map(|v| v * pscale)
        .collect();
        Self {
            profile: BackendProfile {
                kind: BackendKind::Toy,
                name: "toy-image".into(),
                hidden_dim: cfg.hidden_dim,
                joint_dim: cfg.hidden_dim,
                context_limit: cfg.max_length,
                patch_grid: cfg.grid,
                patch_dim: cfg.patch_dim,
                seed: Some(cfg.seed),
            },
            patch: cfg.patch,
            projection,
            pooling,
        }
    }

    /// Patch features as `[g*g][D_in]`, row-major over the grid.
    fn patch_features(&self, image: &Image) -> Result<Vec<Vec<f32>>> {
        let g = self.profile.patch_grid;
        let p = self.patch;
        let side = g * p;
        let img = image.resize(side, side)?;
        let fan_in = CHANNELS * p * p;
        let d = self.profile.patch_dim;
        let mut out = Vec::with_capacity(g * g);
        let mut patch = vec![0f32; fan_in];
        for gy in 0..g {
            for gx in 0..g {
                let mut k = 0;
                for c in 0..CHANNELS {
                    for y in 0..p {
                        for x in 0..p {
                            patch[k] = img.pixel(c, gy * p + y, gx * p + x) * 2.0 - 1.0;
                            k += 1;
                        }
                    }
                }
                let feat = (0..d)
                    .map(|j| {
                        let row = &self.projection[j * fan_in..(j + 1) * fan_in];
                        let s: f32 = row.iter().zip(&patch).map(|(w, x)| w * x).sum();
                        s.tanh()
                    })
                    .collect();
                out.push(feat);
            }
        }
        Ok(out)
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn patch_grid(&self, image: &Image) -> Result<Tensor> {
        let g = self.profile.patch_grid;
        let d = self.profile.patch_dim;
        let feats = self.patch_features(image)?;
        // [g*g, D] -> [D, g, g]
        let flat: Vec<f32> = feats.into_iter().flatten().collect();
        Ok(Tensor::from_vec(flat, (g * g, d), &Device::Cpu)?
            .t()?
            .reshape((d, g, g))?
            .contiguous()?)
    }

    fn embed(&self, image: &Image) -> Result<Vec<f32>> {
        let feats = self.patch_features(image)?;
        let d = self.profile.patch_dim;
        let n = feats.len() as f32;
        let mut mean = vec![0f32; d];
        for f in &feats {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let j = self.profile.joint_dim;
        Ok((0..j)
            .map(|r| {
                self.pooling[r * d..(r + 1) * d]
                    .iter()
                    .zip(&mean)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect())
    }
}

/// Average-pool encoder / nearest-neighbour decoder; the identity for a
/// downsample factor of 1.
#[derive(Debug, Clone, Copy)]
pub struct ToyVae {
    factor: usize,
}

impl ToyVae {
    pub fn new(factor: usize) -> Self {
        Self {
            factor: factor.max(1),
        }
    }

    pub fn identity() -> Self {
        Self::new(1)
    }
}

impl VaeBackend for ToyVae {
    fn downsample_factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        CHANNELS
    }

    fn encode(&self, image: &Image) -> Result<Tensor> {
        self.check_dims(image)?;
        let t = image.to_tensor(&Device::Cpu, DType::F32)?;
        if self.factor == 1 {
            return Ok(t);
        }
        Ok(t.unsqueeze(0)?.avg_pool2d(self.factor)?.squeeze(0)?)
    }

    fn decode(&self, latent: &Tensor) -> Result<Image> {
        let (c, h, w) = latent.dims3()?;
        if c != CHANNELS {
            return Err(Error::Input(format!("toy VAE expects {CHANNELS} latent channels, got {c}")));
        }
        if self.factor == 1 {
            return Image::from_tensor(latent);
        }
        let up = latent
            .unsqueeze(0)?
            .upsample_nearest2d(h * self.factor, w * self.factor)?
            .squeeze(0)?;
        Image::from_tensor(&up)
    }
}

/// Offline text-to-image stand-in: smooth seeded noise whose palette
/// depends on the prompt.
#[derive(Debug, Clone)]
pub struct StubT2I {
    width: usize,
    height: usize,
    seed: u64,
}

impl StubT2I {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            seed,
        }
    }
}

impl T2IClient for StubT2I {
    fn generate(&self, prompt: &str, seed: u64) -> Result<Image> {
        let s = derive_seed(self.seed ^ seed, "t2i", prompt.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let coarse = 4usize;
        let mut low = Vec::with_capacity(CHANNELS * coarse * coarse);
        for _ in 0..CHANNELS {
            let base: f32 = rng.random_range(0.15..0.85);
            for _ in 0..coarse * coarse {
                low.push((base + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0));
            }
        }
        let img = Image::from_planar(coarse, coarse, low)?.resize(self.width, self.height)?;
        let data = img
            .data()
            .iter()
            .map(|v| (v + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0))
            .collect();
        Image::from_planar(self.width, self.height, data)
    }
}
