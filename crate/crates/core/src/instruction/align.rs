//! Convolutional alignment of exemplar patch features into the text
//! hidden space.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encode::PatchGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub kernel: usize,
    pub stride: usize,
    pub input_grid: usize,
    pub feature_dim_in: usize,
    pub feature_dim_out: usize,
}

impl AlignmentConfig {
    pub const DEFAULT_KERNEL: usize = 6;
    pub const DEFAULT_STRIDE: usize = 4;
    pub const DEFAULT_GRID: usize = 14;

    pub fn new(feature_dim_in: usize, feature_dim_out: usize) -> Self {
        Self {
            kernel: Self::DEFAULT_KERNEL,
            stride: Self::DEFAULT_STRIDE,
            input_grid: Self::DEFAULT_GRID,
            feature_dim_in,
            feature_dim_out,
        }
    }

    pub fn with_grid(mut self, grid: usize) -> Self {
        self.input_grid = grid;
        self
    }

    /// `floor((g - kernel) / stride) + 1`.
    pub fn tokens_per_axis(&self) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        if self.kernel > self.input_grid {
            return Err(Error::Config(format!(
                "kernel {} larger than the {}x{} patch grid",
                self.kernel, self.input_grid, self.input_grid
            )));
        }
        Ok((self.input_grid - self.kernel) / self.stride + 1)
    }

    pub fn token_count(&self) -> Result<usize> {
        let k = self.tokens_per_axis()?;
        Ok(k * k)
    }

    pub fn fan_in(&self) -> usize {
        self.feature_dim_in * self.kernel * self.kernel
    }
}

/// Aligned exemplar tokens `[n, D]`.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    tokens: Tensor,
}

impl VisualTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        tokens.dims2()?;
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }
}

/// The trainable map `W`: a strided convolution with bias.
#[derive(Debug, Clone)]
pub struct AlignmentLayer {
    cfg: AlignmentConfig,
    /// `[D_out, D_in, k, k]`
    weight: Tensor,
    /// `[D_out]`
    bias: Tensor,
}

impl AlignmentLayer {
    pub fn from_tensors(cfg: AlignmentConfig, weight: Tensor, bias: Tensor) -> Result<Self> {
        cfg.tokens_per_axis()?;
        let expected = [cfg.feature_dim_out, cfg.feature_dim_in, cfg.kernel, cfg.kernel];
        if weight.dims() != expected {
            return Err(Error::Config(format!(
                "alignment weight {:?} does not match {:?}",
                weight.dims(),
                expected
            )));
        }
        if bias.dims() != [cfg.feature_dim_out] {
            return Err(Error::Config(format!(
                "alignment bias {:?} does not match [{}]",
                bias.dims(),
                cfg.feature_dim_out
            )));
        }
        Ok(Self { cfg, weight, bias })
    }

    /// Small random weights (std `1/sqrt(fan_in)`), zero bias.
    pub fn init(cfg: AlignmentConfig, seed: u64, dtype: DType) -> Result<Self> {
        let (weight, bias) = init_tensors(&cfg, seed, dtype)?;
        Self::from_tensors(cfg, weight, bias)
    }

    pub fn config(&self) -> &AlignmentConfig {
        &self.cfg
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

pub(crate) fn init_tensors(cfg: &AlignmentConfig, seed: u64, dtype: DType) -> Result<(Tensor, Tensor)> {
    let n = cfg.feature_dim_out * cfg.fan_in();
    let std = 1.0 / (cfg.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let weight = Tensor::from_vec(
        values,
        (cfg.feature_dim_out, cfg.feature_dim_in, cfg.kernel, cfg.kernel),
        &Device::Cpu,
    )?
    .to_dtype(dtype)?;
    let bias = Tensor::zeros(cfg.feature_dim_out, dtype, &Device::Cpu)?;
    Ok((weight, bias))
}

/// `h_V = W * C_I(c_E)`: maps a `g×g` patch grid to `k×k` tokens in the
/// text feature dimension, row-major over the output grid.
pub fn align(grid: &PatchGrid, layer: &AlignmentLayer) -> Result<VisualTokens> {
    let cfg = layer.config();
    if grid.grid() != cfg.input_grid || grid.feature_dim() != cfg.feature_dim_in {
        return Err(Error::Config(format!(
            "patch grid [{}, {g}, {g}] does not match alignment input [{}, {e}, {e}]",
            grid.feature_dim(),
            cfg.feature_dim_in,
            g = grid.grid(),
            e = cfg.input_grid
        )));
    }
    let k = cfg.tokens_per_axis()?;
    let x = grid
        .features()
        .to_dtype(layer.weight.dtype())?
        .unsqueeze(0)?;
    let y = x.conv2d(&layer.weight, 0, cfg.stride, 1, 1)?; // [1, D, k, k]
    let y = y.broadcast_add(&layer.bias.reshape((1, cfg.feature_dim_out, 1, 1))?)?;
    let tokens = y
        .reshape((cfg.feature_dim_out, k * k))?
        .t()?
        .contiguous()?;
    VisualTokens::new(tokens)
}
