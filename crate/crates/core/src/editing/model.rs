use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::guidance::GuidanceConfig;
use super::params::{LoraAdapter, LoraConfig, LoraSet, ParamStore, Trainable};
use super::sampler::sample_latent;
use super::schedule::{LatentState, NoiseSchedule, ScheduleConfig};
use super::unet::{ToyUNet, UNetConfig};
use crate::backends::{BackendProfile, Backends, VaeBackend};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instruction::{
    compose_instruction, encode_null_text, init_alignment_tensors, AlignmentConfig, AlignmentLayer,
    BoundInstruction, Padding,
};

pub const DENOISER_FORMAT: &str = "stylebooth/denoiser@1";
pub const TUNER_FORMAT: &str = "stylebooth/tuner@1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub alignment: AlignmentConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    /// Geometry derived from the loaded encoders.
    pub fn for_backends(backends: &Backends, seed: u64) -> Self {
        let text = backends.text.profile();
        let image = backends.image.profile();
        let mut unet = UNetConfig::toy(text.hidden_dim);
        unet.latent_channels = backends.vae.latent_channels();
        Self {
            unet,
            alignment: AlignmentConfig::new(image.patch_dim, text.hidden_dim).with_grid(image.patch_grid),
            schedule: ScheduleConfig::default(),
            precision: Precision::F32,
            seed,
        }
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }
}

/// Resolved networks for one forward pass.
pub struct ModelView {
    pub unet: ToyUNet,
    pub alignment: AlignmentLayer,
}

/// Editing model bundle: encoders, denoiser and alignment parameters, noise
/// schedule and an optional LoRA tuner.
pub struct EditingModel {
    config: ModelConfig,
    backends: Backends,
    store: ParamStore,
    schedule: NoiseSchedule,
    tuner: Option<LoraSet>,
}

impl std::fmt::Debug for EditingModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EditingModel")
            .field("config", &self.config)
            .field("params", &self.store.num_elements())
            .field("tuner", &self.tuner.as_ref().map(|t| t.adapters().len()))
            .finish()
    }
}

impl EditingModel {
    pub fn new(config: ModelConfig, backends: Backends) -> Result<Self> {
        Self::check_geometry(&config, &backends)?;
        let mut store = ParamStore::new(config.precision.dtype());
        config.unet.init_params(&mut store, config.seed)?;
        let (w, b) = init_alignment_tensors(
            &config.alignment,
            config.seed.wrapping_add(1),
            config.precision.dtype(),
        )?;
        store.insert("align.w", w)?;
        store.insert("align.b", b)?;
        let schedule = NoiseSchedule::linear(&config.schedule)?;
        Ok(Self {
            config,
            backends,
            store,
            schedule,
            tuner: None,
        })
    }

    fn check_geometry(config: &ModelConfig, backends: &Backends) -> Result<()> {
        config.alignment.tokens_per_axis()?;
        let text = backends.text.profile();
        if config.unet.context_dim != text.hidden_dim || config.alignment.feature_dim_out != text.hidden_dim {
            return Err(Error::Config(format!(
                "model expects {}-dim instructions, text encoder emits {}",
                config.unet.context_dim, text.hidden_dim
            )));
        }
        if config.unet.latent_channels != backends.vae.latent_channels() {
            return Err(Error::Config(format!(
                "model expects {} latent channels, VAE emits {}",
                config.unet.latent_channels,
                backends.vae.latent_channels()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn tuner(&self) -> Option<&LoraSet> {
        self.tuner.as_ref()
    }

    pub fn set_tuner(&mut self, tuner: Option<LoraSet>) {
        self.tuner = tuner;
    }

    /// A copy with independent parameters sharing the same backends.
    pub fn fork(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            backends: self.backends.clone(),
            store: self.store.deep_clone()?,
            schedule: self.schedule.clone(),
            tuner: self.tuner.clone(),
        })
    }

    pub fn view(&self, trainable: &Trainable) -> Result<ModelView> {
        self.view_with(trainable, self.tuner.as_ref())
    }

    pub fn view_with(&self, trainable: &Trainable, tuner: Option<&LoraSet>) -> Result<ModelView> {
        let w = self.store.weights(trainable, tuner)?;
        let alignment = AlignmentLayer::from_tensors(
            self.config.alignment,
            w.get("align.w")?.clone(),
            w.get("align.b")?.clone(),
        )?;
        Ok(ModelView {
            unet: ToyUNet::new(self.config.unet, w),
            alignment,
        })
    }

    /// Clean latent `E(x)`, `[C, h, w]` in the model dtype.
    pub fn encode_latent(&self, image: &Image) -> Result<LatentState> {
        encode_latent(image, self.backends.vae.as_ref(), self.dtype())
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<Image> {
        self.backends.vae.decode(&z.to_dtype(DType::F32)?)
    }

    /// Padded, weighted instruction features `[L, D]`.
    pub fn instruction_context(&self, bound: &BoundInstruction, layer: &AlignmentLayer) -> Result<Tensor> {
        let h = compose_instruction(
            bound,
            self.backends.text.as_ref(),
            self.backends.image.as_ref(),
            Some(layer),
            Padding::ToMax,
            true,
        )?;
        Ok(h.embeddings().to_dtype(self.dtype())?)
    }

    /// Features of the empty instruction `[L, D]`.
    pub fn null_context(&self) -> Result<Tensor> {
        let h = encode_null_text(self.backends.text.as_ref(), Padding::ToMax)?;
        Ok(h.embeddings().to_dtype(self.dtype())?)
    }

    /// Edits `original` following `instruction`; deterministic in `seed`.
    pub fn sample_edit(
        &self,
        original: &Image,
        instruction: &BoundInstruction,
        guidance: &GuidanceConfig,
        steps: usize,
        seed: u64,
    ) -> Result<Image> {
        let z = self.sample_edit_latent(original, instruction, guidance, steps, seed)?;
        self.decode_latent(&z.squeeze(0)?)
    }

    /// Latent `[1, C, h, w]` produced by [`EditingModel::sample_edit`].
    pub fn sample_edit_latent(
        &self,
        original: &Image,
        instruction: &BoundInstruction,
        guidance: &GuidanceConfig,
        steps: usize,
        seed: u64,
    ) -> Result<Tensor> {
        self.sample_edit_latent_with(original, instruction, guidance, steps, seed, self.tuner.as_ref())
    }

    /// Like [`EditingModel::sample_edit`] with an explicit tuner in place of
    /// the attached one.
    pub fn sample_edit_with(
        &self,
        original: &Image,
        instruction: &BoundInstruction,
        guidance: &GuidanceConfig,
        steps: usize,
        seed: u64,
        tuner: Option<&LoraSet>,
    ) -> Result<Image> {
        let z = self.sample_edit_latent_with(original, instruction, guidance, steps, seed, tuner)?;
        self.decode_latent(&z.squeeze(0)?)
    }

    fn sample_edit_latent_with(
        &self,
        original: &Image,
        instruction: &BoundInstruction,
        guidance: &GuidanceConfig,
        steps: usize,
        seed: u64,
        tuner: Option<&LoraSet>,
    ) -> Result<Tensor> {
        guidance.validate()?;
        let view = self.view_with(&Trainable::None, tuner)?;
        let cond = self.encode_latent(original)?.z.unsqueeze(0)?;
        let ctx = self.instruction_context(instruction, &view.alignment)?.unsqueeze(0)?;
        let null = self.null_context()?.unsqueeze(0)?;
        sample_latent(&view.unet, &self.schedule, &cond, &ctx, &null, guidance, steps, seed)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "format": DENOISER_FORMAT,
            "config": self.config,
            "text_backend": self.backends.text.profile(),
            "image_backend": self.backends.image.profile(),
            "extra": extra,
        });
        checkpoint::save(path, &self.store.to_named_tensors(), &header)
    }

    /// Restores a checkpoint written by [`EditingModel::save`]. The
    /// encoders must match the ones recorded in the header.
    pub fn load(path: &Path, backends: Backends) -> Result<Self> {
        let (tensors, header) = checkpoint::load(path)?;
        if header["format"] != DENOISER_FORMAT {
            return Err(Error::Checkpoint(format!(
                "{} is not a denoiser checkpoint (format {})",
                path.display(),
                header["format"]
            )));
        }
        let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
        let recorded: BackendProfile = serde_json::from_value(header["text_backend"].clone())?;
        if &recorded != backends.text.profile() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with text backend `{}`, loaded backend is `{}`",
                recorded.name,
                backends.text.profile().name
            )));
        }
        let model = Self::new(config, backends)?;
        let expected: Vec<&str> = model.store.names().collect();
        let found: Vec<&str> = tensors.iter().map(|(k, _)| k.as_str()).collect();
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "parameter set mismatch: expected {expected:?}, found {found:?}"
            )));
        }
        for (k, t) in &tensors {
            model.store.set(k, t)?;
        }
        Ok(model)
    }

    pub fn save_tuner(&self, tuner: &LoraSet, path: &Path, extra: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "format": TUNER_FORMAT,
            "lora": tuner.config(),
            "scales": tuner.adapters().iter().map(|(k, a)| (k.clone(), a.scale)).collect::<std::collections::BTreeMap<_, _>>(),
            "config": self.config,
            "extra": extra,
        });
        checkpoint::save(path, &tuner.to_named_tensors(), &header)
    }

    pub fn load_tuner(&self, path: &Path) -> Result<LoraSet> {
        let (tensors, header) = checkpoint::load(path)?;
        if header["format"] != TUNER_FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a tuner checkpoint", path.display())));
        }
        let cfg: LoraConfig = serde_json::from_value(header["lora"].clone())?;
        let scales: std::collections::BTreeMap<String, f64> = serde_json::from_value(header["scales"].clone())?;
        let mut adapters = std::collections::BTreeMap::new();
        for (name, scale) in scales {
            let find = |suffix: &str| {
                tensors
                    .iter()
                    .find(|(k, _)| *k == format!("{name}.{suffix}"))
                    .map(|(_, t)| t.to_dtype(self.dtype()))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {name}.{suffix}")))
            };
            let a = find("lora_a")??;
            let b = find("lora_b")??;
            let base = self.store.get(&name)?;
            if b.dims()[0] != base.dims()[0] || a.dims()[1] * base.dims()[0] != base.elem_count() {
                return Err(Error::Checkpoint(format!("tuner does not fit parameter {name}")));
            }
            adapters.insert(
                name,
                LoraAdapter {
                    a: candle_core::Var::from_tensor(&a)?,
                    b: candle_core::Var::from_tensor(&b)?,
                    scale,
                },
            );
        }
        Ok(LoraSet::from_parts(cfg, adapters))
    }
}

/// `E(x)` as a clean latent state.
pub fn encode_latent(image: &Image, vae: &dyn VaeBackend, dtype: DType) -> Result<LatentState> {
    let z = vae.encode(image)?.to_dtype(dtype)?;
    Ok(LatentState { z, t: 0 })
}

pub fn decode_latent(z: &LatentState, vae: &dyn VaeBackend) -> Result<Image> {
    vae.decode(&z.z.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ToyConfig, ToyVae};
    use crate::instruction::{bind, parse_template, ExemplarRef, ScaleWeights};

    fn small() -> EditingModel {
        let toy = ToyConfig {
            max_length: 24,
            ..ToyConfig::default()
        };
        let backends = Backends::toy(&toy);
        let mut cfg = ModelConfig::for_backends(&backends, 4);
        cfg.unet.channels = 8;
        cfg.unet.attn_dim = 8;
        EditingModel::new(cfg, backends).unwrap()
    }

    fn photo() -> Image {
        let data: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 17) as f32 / 16.0).collect();
        Image::from_planar(8, 8, data).unwrap()
    }

    #[test]
    fn identity_vae_round_trip() {
        let m = small();
        let img = photo();
        let z = m.encode_latent(&img).unwrap();
        assert_eq!(z.z.dims(), &[3, 8, 8]);
        let back = m.decode_latent(&z.z).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(encode_latent(&img, &ToyVae::new(3), DType::F32).is_err());
    }

    #[test]
    fn sample_edit_is_deterministic_and_keeps_size() {
        let m = small();
        let b = BoundInstruction::plain("Make it watercolor").unwrap();
        let g = GuidanceConfig::default();
        let a = m.sample_edit_latent(&photo(), &b, &g, 3, 11).unwrap();
        let c = m.sample_edit_latent(&photo(), &b, &g, 3, 11).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            c.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let out = m.sample_edit(&photo(), &b, &g, 3, 11).unwrap();
        assert_eq!((out.width(), out.height()), (8, 8));
    }

    #[test]
    fn exemplar_instruction_samples() {
        let m = small();
        let t = parse_template("Let this image be in the style of <image>").unwrap();
        let ex = ExemplarRef::inline("ex", Image::filled(32, 32, [0.8, 0.2, 0.1]).unwrap());
        let b = bind(t, vec![], vec![ex], ScaleWeights::default()).unwrap();
        let out = m.sample_edit(&photo(), &b, &GuidanceConfig::default(), 2, 0).unwrap();
        assert_eq!(out.width(), 8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.safetensors");
        m.save(&p, serde_json::json!({"note": "t"})).unwrap();
        let backends = m.backends().clone();
        let loaded = EditingModel::load(&p, backends).unwrap();
        assert_eq!(loaded.config(), m.config());
        for (k, v) in m.store().iter() {
            let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = loaded.store().get(k).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{k}");
        }
        let other = Backends::toy(&ToyConfig {
            seed: 9,
            max_length: 24,
            ..ToyConfig::default()
        });
        assert!(matches!(EditingModel::load(&p, other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn tuner_round_trip() {
        let m = small();
        let lora = LoraSet::init(m.store(), &Trainable::prefixes(&["dec."]), LoraConfig { rank: 2, alpha: 2.0 }, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.safetensors");
        m.save_tuner(&lora, &p, serde_json::Value::Null).unwrap();
        let back = m.load_tuner(&p).unwrap();
        assert_eq!(back.adapters().len(), lora.adapters().len());
        assert!(m.load_tuner(&dir.path().join("missing.safetensors")).is_err());
    }
}
