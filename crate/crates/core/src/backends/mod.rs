//! Encoder and generator seams.
//!
//! Every model-facing stage talks to these traits only. The toy
//! implementations are pure functions of `(input, seed)`. Pretrained
//! encoders plug in behind the same traits; none ship with this build.

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub mod toy;

pub use toy::{StubT2I, ToyConfig, ToyImageEncoder, ToyTextEncoder, ToyVae};

/// Literal reserved for exemplar slots; tokenizers must map it to one token.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

pub const BACKEND_ENV: &str = "STYLEBOOTH_BACKEND";
pub const WEIGHTS_ENV: &str = "STYLEBOOTH_WEIGHTS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Toy,
    Real,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "toy" => Ok(BackendKind::Toy),
            "real" => Ok(BackendKind::Real),
            other => Err(Error::Config(format!(
                "unknown backend `{other}` (expected toy|real)"
            ))),
        }
    }
}

/// Echoed into checkpoints and reports so results can be traced to the
/// encoders that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub kind: BackendKind,
    pub name: String,
    /// Text hidden size `D`.
    pub hidden_dim: usize,
    /// Dimension of the joint text/image embedding space used for scoring.
    pub joint_dim: usize,
    pub context_limit: usize,
    pub patch_grid: usize,
    pub patch_dim: usize,
    pub seed: Option<u64>,
}

pub trait TextEncoder: Send + Sync {
    fn profile(&self) -> &BackendProfile;

    /// Token ids without padding. [`IMAGE_PLACEHOLDER`] must come back as
    /// exactly one [`TextEncoder::placeholder_id`] token.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;

    fn placeholder_id(&self) -> u32;

    fn pad_id(&self) -> u32;

    /// Per-token hidden states, `[L, D]` in `f32`.
    fn hidden_states(&self, ids: &[u32]) -> Result<Tensor>;

    /// Global embedding of a caption in the joint space.
    fn embed(&self, text: &str) -> Result<Vec<f32>>;

    fn max_length(&self) -> usize {
        self.profile().context_limit
    }

    fn hidden_dim(&self) -> usize {
        self.profile().hidden_dim
    }
}

pub trait ImageEncoder: Send + Sync {
    fn profile(&self) -> &BackendProfile;

    /// Patch features after the last layer, `[D_in, g, g]`, class token
    /// excluded.
    fn patch_grid(&self, image: &Image) -> Result<Tensor>;

    /// Global embedding in the joint space.
    fn embed(&self, image: &Image) -> Result<Vec<f32>>;
}

pub trait VaeBackend: Send + Sync {
    fn downsample_factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    /// `[C, H/f, W/f]` latent.
    fn encode(&self, image: &Image) -> Result<Tensor>;

    fn decode(&self, latent: &Tensor) -> Result<Image>;

    fn check_dims(&self, image: &Image) -> Result<()> {
        let f = self.downsample_factor();
        if image.width() % f != 0 || image.height() % f != 0 {
            return Err(Error::Input(format!(
                "image {}x{} not divisible by the VAE downsample factor {f}",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }
}

pub trait T2IClient: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64) -> Result<Image>;
}

/// The four seams bundled for convenience.
#[derive(Clone)]
pub struct Backends {
    pub text: Arc<dyn TextEncoder>,
    pub image: Arc<dyn ImageEncoder>,
    pub vae: Arc<dyn VaeBackend>,
    pub t2i: Arc<dyn T2IClient>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("text", self.text.profile())
            .field("image", self.image.profile())
            .field("vae_factor", &self.vae.downsample_factor())
            .finish()
    }
}

impl Backends {
    pub fn toy(cfg: &ToyConfig) -> Self {
        Self {
            text: Arc::new(ToyTextEncoder::new(cfg)),
            image: Arc::new(ToyImageEncoder::new(cfg)),
            vae: Arc::new(ToyVae::new(cfg.vae_factor)),
            t2i: Arc::new(StubT2I::new(cfg.image_size, cfg.image_size, cfg.seed)),
        }
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        match cfg.kind {
            BackendKind::Toy => Ok(Self::toy(&cfg.toy)),
            BackendKind::Real => Err(Error::Config(
                "real backends requested but this build ships only the toy backends".into(),
            )),
        }
    }
}

/// Backend selection, read from a TOML file and overridden by
/// `STYLEBOOTH_BACKEND` / `STYLEBOOTH_WEIGHTS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub toy: ToyConfig,
    /// Directory with `clip.safetensors`, `tokenizer.json`, `vae.safetensors`.
    pub weights_dir: Option<PathBuf>,
    /// Text-to-image HTTP endpoint for the real client.
    pub t2i_endpoint: Option<String>,
}

impl BackendConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("backend config: {e}")))
    }

    /// Applies environment overrides on top of `self`.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(kind) = std::env::var(BACKEND_ENV) {
            self.kind = kind.parse()?;
        }
        if let Ok(dir) = std::env::var(WEIGHTS_ENV) {
            self.weights_dir = Some(PathBuf::from(dir));
        }
        Ok(self)
    }
}

/// Cosine similarity; zero-norm inputs score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}
