use std::sync::Arc;

use super::guidance::GuidanceConfig;
use super::model::EditingModel;
use crate::error::Result;
use crate::image::Image;
use crate::instruction::BoundInstruction;

/// Anything that turns `(image, instruction)` into an edited image.
pub trait Editor: Send + Sync {
    fn edit(&self, image: &Image, instruction: &BoundInstruction, seed: u64) -> Result<Image>;
}

/// [`EditingModel`] with fixed sampling settings.
#[derive(Clone)]
pub struct ModelEditor {
    pub model: Arc<EditingModel>,
    pub guidance: GuidanceConfig,
    pub steps: usize,
}

impl ModelEditor {
    pub fn new(model: Arc<EditingModel>, guidance: GuidanceConfig, steps: usize) -> Self {
        Self { model, guidance, steps }
    }
}

impl Editor for ModelEditor {
    fn edit(&self, image: &Image, instruction: &BoundInstruction, seed: u64) -> Result<Image> {
        self.model.sample_edit(image, instruction, &self.guidance, self.steps, seed)
    }
}
