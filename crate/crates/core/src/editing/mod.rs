//! Latent-diffusion editing: noise schedule, a conditional denoiser over
//! `[z_t ; E(c_I)]` that cross-attends to the instruction, the noise
//! prediction objective, two-condition classifier-free guidance with
//! rescaling, DDIM sampling, fine-tuning and LoRA tuners.

pub mod checkpoint;
mod editor;
mod guidance;
mod model;
mod params;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use editor::{Editor, ModelEditor};
pub use guidance::{cfg_predict, combine_guidance, GuidanceConfig};
pub use model::{
    decode_latent, encode_latent, EditingModel, ModelConfig, ModelView, Precision, DENOISER_FORMAT,
    TUNER_FORMAT,
};
pub use params::{LoraAdapter, LoraConfig, LoraSet, ParamStore, Trainable, Weights};
pub use sampler::{ddim_from, gaussian, sample_latent};
pub use schedule::{LatentState, NoiseSchedule, ScheduleConfig};
pub use train::{
    finetune, prepare_batch, train_tuner, training_loss, DropFlags, DropoutConfig, FinetuneMode,
    NoiseDraw, TrainReport, TrainSchedule, TrainingBatch, TrainingExample,
};
pub use unet::{timestep_embedding, Denoiser, ToyUNet, UNetConfig};
