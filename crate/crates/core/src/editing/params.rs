use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parameters receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trainable {
    All,
    None,
    /// Parameters whose names start with any of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes(p: &[&str]) -> Self {
        Self::Prefixes(p.iter().map(|s| s.to_string()).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            Self::All => true,
            Self::None => false,
            Self::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Named, mutable parameters. Names are dotted paths such as `enc.conv_in.w`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let v = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.params.insert(name.into(), v);
        Ok(())
    }

    /// Draws `N(0, std²)` entries from `rng`.
    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(v, shape, &Device::Cpu)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape, self.dtype, &Device::Cpu)?)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self, trainable: &Trainable) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| trainable.contains(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Overwrites a parameter in place, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.get(name)?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// A deep copy whose parameters no longer alias this store.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Effective tensors for a forward pass. Frozen entries are detached so
    /// their gradient is identically zero; LoRA deltas are added on top.
    pub fn weights(&self, trainable: &Trainable, lora: Option<&LoraSet>) -> Result<Weights> {
        let mut map = HashMap::with_capacity(self.params.len());
        for (k, v) in &self.params {
            let base = if trainable.contains(k) {
                v.as_tensor().clone()
            } else {
                v.as_tensor().detach()
            };
            let t = match lora.and_then(|l| l.delta(k)) {
                Some(delta) => (base + delta?.reshape(v.dims())?)?,
                None => base,
            };
            map.insert(k.clone(), t);
        }
        Ok(Weights { map })
    }

    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }
}

/// Resolved tensors consumed by a forward pass.
#[derive(Debug, Clone)]
pub struct Weights {
    map: HashMap<String, Tensor>,
}

impl Weights {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 256,
            alpha: 256.0,
        }
    }
}

/// One low-rank adapter `ΔW = scale · B·A` over a weight viewed as
/// `[out, in·k·k]`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Low-rank adapters keyed by the base parameter they modify.
#[derive(Debug, Clone)]
pub struct LoraSet {
    cfg: LoraConfig,
    adapters: BTreeMap<String, LoraAdapter>,
}

impl LoraSet {
    /// Adapters on every weight (`*.w`, rank ≥ 2) matching `targets`.
    /// `B` starts at zero so the adapted model equals the base model; the
    /// rank is capped at the smaller side of each matrix.
    pub fn init(store: &ParamStore, targets: &Trainable, cfg: LoraConfig, seed: u64) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = BTreeMap::new();
        for (name, v) in store.iter() {
            if !name.ends_with(".w") || v.rank() < 2 || !targets.contains(name) {
                continue;
            }
            let out = v.dims()[0];
            let inner = v.elem_count() / out;
            let r = cfg.rank.min(out).min(inner);
            let normal = Normal::new(0.0, 1.0 / (inner as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let av: Vec<f64> = (0..r * inner).map(|_| normal.sample(&mut rng)).collect();
            let a = Tensor::from_vec(av, (r, inner), &Device::Cpu)?.to_dtype(store.dtype())?;
            let b = Tensor::zeros((out, r), store.dtype(), &Device::Cpu)?;
            adapters.insert(
                name.to_string(),
                LoraAdapter {
                    a: Var::from_tensor(&a)?,
                    b: Var::from_tensor(&b)?,
                    scale: cfg.alpha / r as f64,
                },
            );
        }
        if adapters.is_empty() {
            return Err(Error::Config("no parameters matched the LoRA targets".into()));
        }
        Ok(Self { cfg, adapters })
    }

    pub fn from_parts(cfg: LoraConfig, adapters: BTreeMap<String, LoraAdapter>) -> Self {
        Self { cfg, adapters }
    }

    pub fn config(&self) -> &LoraConfig {
        &self.cfg
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.adapters
    }

    pub fn vars(&self) -> Vec<Var> {
        self.adapters
            .values()
            .flat_map(|a| [a.a.clone(), a.b.clone()])
            .collect()
    }

    pub fn delta(&self, name: &str) -> Option<Result<Tensor>> {
        self.adapters.get(name).map(|ad| {
            let d = ad.b.as_tensor().matmul(ad.a.as_tensor())?;
            Ok(d.affine(ad.scale, 0.0)?)
        })
    }

    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.adapters.len() * 2);
        for (k, ad) in &self.adapters {
            out.push((format!("{k}.lora_a"), ad.a.as_tensor().clone()));
            out.push((format!("{k}.lora_b"), ad.b.as_tensor().clone()));
        }
        out
    }
}
