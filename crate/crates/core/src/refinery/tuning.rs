use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::ImagePair;
use super::styles::{Direction, StyleSpec, TunerRef};
use crate::editing::{self, DropoutConfig, EditingModel, GuidanceConfig, LoraConfig, LoraSet, TrainReport, TrainSchedule, TrainingExample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instruction::BoundInstruction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerSchedule {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Square training resolution.
    pub resolution: usize,
    /// Images are scaled by a factor drawn from this range, then
    /// center-cropped back to `resolution`.
    pub resize_min: f64,
    pub resize_max: f64,
    /// Augmented copies drawn per pair.
    pub augment_copies: usize,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TunerSchedule {
    fn default() -> Self {
        Self {
            steps: 10000,
            learning_rate: 1e-4,
            batch_size: 4,
            resolution: 1024,
            resize_min: 1.0,
            resize_max: 1.125,
            augment_copies: 4,
            rank: 256,
            alpha: 256.0,
            seed: 0,
        }
    }
}

impl TunerSchedule {
    /// Small override for desk-scale runs.
    pub fn toy(steps: usize, resolution: usize) -> Self {
        Self {
            steps,
            learning_rate: 1e-3,
            resolution,
            rank: 4,
            alpha: 4.0,
            augment_copies: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.augment_copies == 0 || self.rank == 0 {
            return Err(Error::Config("tuner resolution, copies and rank must be positive".into()));
        }
        if !(self.resize_min >= 1.0 && self.resize_min <= self.resize_max) {
            return Err(Error::Config(format!(
                "resize range [{}, {}] must start at 1 or above and be ordered",
                self.resize_min, self.resize_max
            )));
        }
        Ok(())
    }
}

/// Resizes `img` to `resolution·scale` and center-crops back to `resolution`.
pub fn resize_crop(img: &Image, resolution: usize, scale: f64) -> Result<Image> {
    let side = ((resolution as f64 * scale).round() as usize).max(resolution);
    img.resize(side, side)?.center_crop(resolution, resolution)
}

/// Source and target get the same scale so they stay aligned.
pub fn augment_pair<R: Rng + ?Sized>(
    source: &Image,
    target: &Image,
    schedule: &TunerSchedule,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let s = if schedule.resize_max > schedule.resize_min {
        rng.random_range(schedule.resize_min..=schedule.resize_max)
    } else {
        schedule.resize_min
    };
    Ok((
        resize_crop(source, schedule.resolution, s)?,
        resize_crop(target, schedule.resolution, s)?,
    ))
}

/// Edits images, optionally through a trained tuner, and trains tuners.
pub trait RoundEditor: Send + Sync {
    fn describe(&self) -> String;

    fn edit(&self, image: &Image, instruction: &BoundInstruction, tuner: Option<&TunerRef>, seed: u64) -> Result<Image>;

    /// Trains a tuner on `examples` and writes it to `tuner.checkpoint`.
    fn train(&self, examples: &[TrainingExample], tuner: &TunerRef, schedule: &TunerSchedule) -> Result<TrainReport>;
}

/// [`RoundEditor`] on an [`EditingModel`] with LoRA tuners.
pub struct ModelRoundEditor {
    model: Arc<EditingModel>,
    guidance: GuidanceConfig,
    steps: usize,
    cache: Mutex<HashMap<PathBuf, Arc<LoraSet>>>,
}

impl ModelRoundEditor {
    pub fn new(model: Arc<EditingModel>, guidance: GuidanceConfig, steps: usize) -> Self {
        Self {
            model,
            guidance,
            steps,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn tuner(&self, path: &Path) -> Result<Arc<LoraSet>> {
        if let Some(t) = self.cache.lock().expect("tuner cache").get(path) {
            return Ok(t.clone());
        }
        let t = Arc::new(self.model.load_tuner(path)?);
        self.cache.lock().expect("tuner cache").insert(path.to_path_buf(), t.clone());
        Ok(t)
    }
}

impl RoundEditor for ModelRoundEditor {
    fn describe(&self) -> String {
        format!("editing-model steps={} image={} text={}", self.steps, self.guidance.image_scale, self.guidance.text_scale)
    }

    fn edit(&self, image: &Image, instruction: &BoundInstruction, tuner: Option<&TunerRef>, seed: u64) -> Result<Image> {
        let lora = tuner.map(|t| self.tuner(&t.checkpoint)).transpose()?;
        self.model
            .sample_edit_with(image, instruction, &self.guidance, self.steps, seed, lora.as_deref())
    }

    fn train(&self, examples: &[TrainingExample], tuner: &TunerRef, schedule: &TunerSchedule) -> Result<TrainReport> {
        let ts = TrainSchedule {
            steps: schedule.steps,
            learning_rate: schedule.learning_rate,
            batch_size: schedule.batch_size,
            weight_decay: 0.0,
            dropout: DropoutConfig::none(),
            eval_size: 16,
            seed: schedule.seed,
        };
        let lora = LoraConfig {
            rank: schedule.rank,
            alpha: schedule.alpha,
        };
        let (set, report) = editing::train_tuner(&self.model, examples, lora, &ts)?;
        let meta = serde_json::json!({
            "tuner": tuner,
            "schedule": schedule,
            "final_eval_loss": report.final_eval_loss,
            "initial_eval_loss": report.initial_eval_loss,
        });
        self.model.save_tuner(&set, &tuner.checkpoint, meta)?;
        self.cache.lock().expect("tuner cache").remove(&tuner.checkpoint);
        Ok(report)
    }
}

/// Checks the pair set, augments it and trains one tuner for `style`.
///
/// `root` resolves pair image paths; the checkpoint goes to `checkpoint`.
#[allow(clippy::too_many_arguments)]
pub fn train_tuner(
    style: &StyleSpec,
    direction: Direction,
    round: usize,
    pairs: &[ImagePair],
    instruction: &BoundInstruction,
    root: &Path,
    checkpoint: PathBuf,
    schedule: &TunerSchedule,
    editor: &dyn RoundEditor,
) -> Result<(TunerRef, TrainReport)> {
    schedule.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("no usable pairs to train the {direction} tuner of `{}`", style.name)));
    }
    if let Some(p) = pairs.iter().find(|p| p.style != style.name) {
        return Err(Error::Validation(format!(
            "pair `{}` is style `{}`; a tuner covers exactly one style (`{}`)",
            p.id, p.style, style.name
        )));
    }
    if let Some(p) = pairs.iter().find(|p| p.usable() != Some(true)) {
        return Err(Error::Validation(format!("pair `{}` did not pass the filter", p.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut examples = Vec::with_capacity(pairs.len() * schedule.augment_copies);
    for p in pairs {
        let source = Image::load(&root.join(&p.source_ref))?;
        let target = Image::load(&root.join(&p.target_ref))?;
        for _ in 0..schedule.augment_copies {
            let (s, t) = augment_pair(&source, &target, schedule, &mut rng)?;
            examples.push(TrainingExample {
                source: s,
                target: t,
                instruction: instruction.clone(),
            });
        }
    }
    if let Some(parent) = checkpoint.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tuner = TunerRef {
        style: style.name.clone(),
        direction,
        round,
        rank: schedule.rank,
        checkpoint,
    };
    let report = editor.train(&examples, &tuner, schedule)?;
    Ok((tuner, report))
}
