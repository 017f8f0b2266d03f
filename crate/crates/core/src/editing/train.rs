use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::EditingModel;
use super::params::{LoraConfig, LoraSet, Trainable};
use super::sampler::gaussian;
use super::schedule::NoiseSchedule;
use super::unet::Denoiser;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instruction::{
    align, blend_exemplars, encode_exemplar, encode_text, insert, AlignmentLayer, BoundInstruction,
    FeatureSequence, Padding, PatchGrid, SlotKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    TextBased,
    ExemplarBased,
}

impl FinetuneMode {
    /// Text mode tunes the whole denoiser; exemplar mode only the alignment
    /// layer and the decoder half.
    pub fn trainable(self) -> Trainable {
        match self {
            FinetuneMode::TextBased => Trainable::prefixes(&["time.", "enc.", "dec."]),
            FinetuneMode::ExemplarBased => Trainable::prefixes(&["align.", "dec."]),
        }
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "text_based" => Ok(Self::TextBased),
            "exemplar" | "exemplar_based" => Ok(Self::ExemplarBased),
            other => Err(Error::Config(format!("unknown fine-tune mode `{other}`"))),
        }
    }
}

/// Null-condition dropout bands over one uniform draw `u`:
/// `[0, p_text)` text only, `[p_text, p_text + p_both)` both,
/// `[.., + p_image)` image only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p_text: f64,
    pub p_both: f64,
    pub p_image: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            p_text: 0.05,
            p_both: 0.05,
            p_image: 0.05,
        }
    }
}

impl DropoutConfig {
    pub fn none() -> Self {
        Self {
            p_text: 0.0,
            p_both: 0.0,
            p_image: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_text, self.p_both, self.p_image];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 {
            return Err(Error::Config("dropout probabilities must be in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }

    pub fn flags(&self, u: f64) -> DropFlags {
        let a = self.p_text;
        let b = a + self.p_both;
        let c = b + self.p_image;
        DropFlags {
            text: u < b,
            image: u >= a && u < c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropFlags {
    pub text: bool,
    pub image: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout: DropoutConfig,
    /// Examples in the fixed held-out batch used for before/after loss.
    pub eval_size: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn text_based() -> Self {
        Self {
            steps: 5000,
            learning_rate: 1e-4,
            batch_size: 4,
            weight_decay: 0.0,
            dropout: DropoutConfig::default(),
            eval_size: 16,
            seed: 0,
        }
    }

    pub fn exemplar_based() -> Self {
        Self {
            steps: 35000,
            learning_rate: 1e-5,
            ..Self::text_based()
        }
    }

    pub fn for_mode(mode: FinetuneMode) -> Self {
        match mode {
            FinetuneMode::TextBased => Self::text_based(),
            FinetuneMode::ExemplarBased => Self::exemplar_based(),
        }
    }

    pub fn with_steps(mut self, steps: usize, learning_rate: f64) -> Self {
        self.steps = steps;
        self.learning_rate = learning_rate;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.dropout.validate()
    }
}

/// One `(source, target, instruction)` training record.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub source: Image,
    pub target: Image,
    pub instruction: BoundInstruction,
}

/// Latents and instruction features for a batch.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// Target latents `[B, C, H, W]`.
    pub x0: Tensor,
    /// Source latents `[B, C, H, W]`.
    pub image_cond: Tensor,
    /// Instructions `[B, L, D]`.
    pub context: Tensor,
}

/// Timesteps, noise and dropout flags for one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
    pub drops: Vec<DropFlags>,
}

impl NoiseDraw {
    pub fn sample(
        shape: &[usize],
        num_steps: usize,
        dropout: &DropoutConfig,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Self> {
        let b = shape[0];
        let timesteps = (0..b).map(|_| rng.random_range(0..num_steps)).collect();
        let drops = (0..b).map(|_| dropout.flags(rng.random::<f64>())).collect();
        let eps = gaussian(shape, rng, dtype)?;
        Ok(Self { timesteps, eps, drops })
    }
}

fn keep_mask(flags: impl Iterator<Item = bool>, rank: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = flags.map(|d| if d { 0.0 } else { 1.0 }).collect();
    let mut shape = vec![1usize; rank];
    shape[0] = v.len();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `mean ‖ε_θ(z_t, t, h, E(c_I)) − ε‖²` with dropped conditions replaced by
/// the null instruction and a zero image latent.
pub fn training_loss(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    batch: &TrainingBatch,
    draw: &NoiseDraw,
    null_context: &Tensor,
) -> Result<Tensor> {
    let b = batch.x0.dims()[0];
    if draw.timesteps.len() != b || draw.drops.len() != b || draw.eps.dims() != batch.x0.dims() {
        return Err(Error::Config("noise draw does not match the batch".into()));
    }
    let dtype = batch.x0.dtype();
    let z_t = schedule.add_noise_batch(&batch.x0, &draw.timesteps, &draw.eps)?;

    let keep_t = keep_mask(draw.drops.iter().map(|d| d.text), 3, dtype)?;
    let keep_i = keep_mask(draw.drops.iter().map(|d| d.image), 4, dtype)?;
    let null = null_context.to_dtype(dtype)?.unsqueeze(0)?;
    let dropped = null.broadcast_mul(&keep_t.affine(-1.0, 1.0)?)?;
    let context = (batch.context.broadcast_mul(&keep_t)? + dropped)?;
    let cond = batch.image_cond.broadcast_mul(&keep_i)?;

    let pred = denoiser.predict_noise(&z_t, &draw.timesteps, &context, &cond)?;
    let loss = (pred - &draw.eps)?.sqr()?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss is {value} at timesteps {:?}",
            draw.timesteps
        )));
    }
    Ok(loss)
}

/// Per-example tensors that do not depend on trainable parameters.
struct Prepared {
    x0: Tensor,
    cond: Tensor,
    text: FeatureSequence,
    /// Per image slot: the exemplar's patch grids with blend weights.
    exemplars: Vec<Vec<(PatchGrid, f32)>>,
}

fn prepare(model: &EditingModel, ex: &TrainingExample) -> Result<Prepared> {
    let x0 = model.encode_latent(&ex.target)?.z;
    let cond = model.encode_latent(&ex.source)?.z;
    if x0.dims() != cond.dims() {
        return Err(Error::Dataset(format!(
            "source latent {:?} and target latent {:?} differ",
            cond.dims(),
            x0.dims()
        )));
    }
    let backends = model.backends();
    let text = encode_text(&ex.instruction, backends.text.as_ref(), Padding::ToMax)?;
    let text = text.with_embeddings(text.embeddings().to_dtype(model.dtype())?)?;
    let cfg = &model.config().alignment;
    let mut exemplars = Vec::new();
    for e in ex.instruction.exemplars() {
        let parts = match e.blend_parts() {
            Some(parts) => parts
                .iter()
                .map(|(p, w)| Ok((encode_exemplar(&p.load()?, backends.image.as_ref(), cfg)?, *w)))
                .collect::<Result<Vec<_>>>()?,
            None => vec![(encode_exemplar(&e.load()?, backends.image.as_ref(), cfg)?, 1.0)],
        };
        exemplars.push(parts);
    }
    Ok(Prepared { x0, cond, text, exemplars })
}

/// Instruction features with freshly aligned exemplar tokens; unweighted.
fn context_for(p: &Prepared, layer: &AlignmentLayer) -> Result<Tensor> {
    if p.exemplars.is_empty() {
        return Ok(p.text.embeddings().clone());
    }
    let groups = p
        .exemplars
        .iter()
        .map(|parts| {
            if parts.len() == 1 {
                align(&parts[0].0, layer)
            } else {
                let g = parts.iter().map(|(grid, _)| align(grid, layer)).collect::<Result<Vec<_>>>()?;
                let w: Vec<f32> = parts.iter().map(|(_, w)| *w).collect();
                blend_exemplars(&g, &w)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(insert(&p.text, &groups)?.embeddings().clone())
}

fn stack(prepared: &[&Prepared], layer: &AlignmentLayer) -> Result<TrainingBatch> {
    let x0: Vec<&Tensor> = prepared.iter().map(|p| &p.x0).collect();
    let cond: Vec<&Tensor> = prepared.iter().map(|p| &p.cond).collect();
    let ctx = prepared.iter().map(|p| context_for(p, layer)).collect::<Result<Vec<_>>>()?;
    Ok(TrainingBatch {
        x0: Tensor::stack(&x0, 0)?,
        image_cond: Tensor::stack(&cond, 0)?,
        context: Tensor::stack(&ctx, 0)?,
    })
}

/// Encodes examples into a batch using `layer` for exemplar alignment.
pub fn prepare_batch(
    model: &EditingModel,
    examples: &[&TrainingExample],
    layer: &AlignmentLayer,
) -> Result<TrainingBatch> {
    let prepared = examples.iter().map(|e| prepare(model, e)).collect::<Result<Vec<_>>>()?;
    stack(&prepared.iter().collect::<Vec<_>>(), layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Option<FinetuneMode>,
    pub steps: usize,
    pub learning_rate: f64,
    pub losses: Vec<f64>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

fn validate_dataset(mode: FinetuneMode, dataset: &[TrainingExample]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if mode == FinetuneMode::ExemplarBased {
        if let Some(i) = dataset
            .iter()
            .position(|e| e.instruction.template().count(SlotKind::Image) == 0)
        {
            return Err(Error::Dataset(format!(
                "exemplar mode needs an <image> slot in every record; record {i} has none"
            )));
        }
    }
    Ok(())
}

/// What the optimiser updates.
enum Target<'a> {
    Base(Trainable),
    Tuner(&'a LoraSet),
}

fn run(
    model: &EditingModel,
    dataset: &[TrainingExample],
    target: Target<'_>,
    schedule: &TrainSchedule,
    exemplar_trainable: bool,
) -> Result<TrainReport> {
    schedule.validate()?;
    let prepared = dataset.iter().map(|e| prepare(model, e)).collect::<Result<Vec<_>>>()?;
    let shape = prepared[0].x0.dims().to_vec();
    if prepared.iter().any(|p| p.x0.dims() != shape.as_slice()) {
        return Err(Error::Dataset("all training images must share one size".into()));
    }
    let dtype = model.dtype();
    let null = model.null_context()?;
    let (trainable, tuner, vars) = match &target {
        Target::Base(t) => (t.clone(), model.tuner(), model.store().vars(t)),
        Target::Tuner(l) => (Trainable::None, Some(*l), l.vars()),
    };
    if vars.is_empty() {
        return Err(Error::Config("nothing to train".into()));
    }
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: schedule.learning_rate,
            weight_decay: schedule.weight_decay,
            ..Default::default()
        },
    )?;

    // Contexts that do not depend on trainable weights are computed once.
    let frozen_view = model.view_with(&Trainable::None, tuner)?;
    let cached: Option<Vec<Tensor>> = if exemplar_trainable {
        None
    } else {
        Some(
            prepared
                .iter()
                .map(|p| context_for(p, &frozen_view.alignment))
                .collect::<Result<_>>()?,
        )
    };
    let batch_for = |idx: &[usize], layer: &AlignmentLayer| -> Result<TrainingBatch> {
        match &cached {
            Some(ctx) => Ok(TrainingBatch {
                x0: Tensor::stack(&idx.iter().map(|&i| &prepared[i].x0).collect::<Vec<_>>(), 0)?,
                image_cond: Tensor::stack(&idx.iter().map(|&i| &prepared[i].cond).collect::<Vec<_>>(), 0)?,
                context: Tensor::stack(&idx.iter().map(|&i| &ctx[i]).collect::<Vec<_>>(), 0)?,
            }),
            None => stack(&idx.iter().map(|&i| &prepared[i]).collect::<Vec<_>>(), layer),
        }
    };

    let eval_idx: Vec<usize> = (0..prepared.len().min(schedule.eval_size.max(1))).collect();
    let mut eval_shape = shape.clone();
    eval_shape.insert(0, eval_idx.len());
    let mut eval_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5eed_e7a1);
    let eval_draw = NoiseDraw::sample(
        &eval_shape,
        model.schedule().num_steps(),
        &DropoutConfig::none(),
        &mut eval_rng,
        dtype,
    )?;
    let eval_loss = |view: &super::model::ModelView| -> Result<f64> {
        let batch = batch_for(&eval_idx, &view.alignment)?;
        let l = training_loss(&view.unet, model.schedule(), &batch, &eval_draw, &null)?;
        Ok(l.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let initial_eval_loss = eval_loss(&frozen_view)?;

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut batch_shape = shape.clone();
    batch_shape.insert(0, schedule.batch_size);
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let idx: Vec<usize> = (0..schedule.batch_size)
            .map(|_| rng.random_range(0..prepared.len()))
            .collect();
        let draw = NoiseDraw::sample(
            &batch_shape,
            model.schedule().num_steps(),
            &schedule.dropout,
            &mut rng,
            dtype,
        )?;
        let view = model.view_with(&trainable, tuner)?;
        let batch = batch_for(&idx, &view.alignment)?;
        let loss = training_loss(&view.unet, model.schedule(), &batch, &draw, &null)?;
        opt.backward_step(&loss)?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        losses.push(v);
        if step % 100 == 0 {
            tracing::debug!(step, loss = v, "train step");
        }
    }
    let final_eval_loss = eval_loss(&model.view_with(&Trainable::None, tuner)?)?;
    Ok(TrainReport {
        mode: None,
        steps: schedule.steps,
        learning_rate: schedule.learning_rate,
        losses,
        initial_eval_loss,
        final_eval_loss,
    })
}

/// Fine-tunes `model` in place.
pub fn finetune(
    model: &mut EditingModel,
    mode: FinetuneMode,
    dataset: &[TrainingExample],
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    validate_dataset(mode, dataset)?;
    let trainable = mode.trainable();
    let report = run(
        model,
        dataset,
        Target::Base(trainable.clone()),
        schedule,
        trainable.contains("align.w"),
    )?;
    Ok(TrainReport {
        mode: Some(mode),
        ..report
    })
}

/// Trains a LoRA tuner on top of the frozen model.
pub fn train_tuner(
    model: &EditingModel,
    dataset: &[TrainingExample],
    lora: LoraConfig,
    schedule: &TrainSchedule,
) -> Result<(LoraSet, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let set = LoraSet::init(
        model.store(),
        &Trainable::prefixes(&["enc.", "dec."]),
        lora,
        schedule.seed.wrapping_add(17),
    )?;
    let report = run(model, dataset, Target::Tuner(&set), schedule, false)?;
    Ok((set, report))
}
