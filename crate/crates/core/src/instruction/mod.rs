//! Multimodal instructions: templates with `<style>` / `<image>` slots,
//! text and exemplar encoding, alignment of exemplar patches into the text
//! hidden space, token insertion, and per-slot scale weighting.
//!
//! Typical flow:
//!
//! ```text
//! parse_template -> bind -> encode_text ----------------\
//!                           encode_exemplar -> align ----> insert -> apply_scale_weights
//! ```

mod align;
mod compose;
mod encode;
mod sequence;
mod template;

use std::path::Path;

pub use align::{align, AlignmentConfig, AlignmentLayer, VisualTokens};
pub(crate) use align::init_tensors as init_alignment_tensors;
pub use compose::{apply_scale_weights, blend_exemplars, insert};
pub use encode::{encode_exemplar, encode_null_text, encode_text, Padding, PatchGrid};
pub use sequence::{FeatureSequence, SlotSpan, TokenTag};
pub use template::{
    bind, parse_template, BoundInstruction, ExemplarRef, InstructionTemplate, ScaleWeights, Slot,
    SlotKind, IMAGE_IDENT, STYLE_IDENT,
};

use crate::backends::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};

pub const TEXT_TEMPLATES: &str = include_str!("../../fixtures/templates_text.txt");
pub const EXEMPLAR_TEMPLATES: &str = include_str!("../../fixtures/templates_exemplar.txt");

/// Parses a template fixture: one template per line, blank lines skipped.
pub fn parse_template_lines(text: &str) -> Result<Vec<InstructionTemplate>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            parse_template(l.trim_end()).map_err(|e| match e {
                Error::Parse { offset, reason } => Error::Parse {
                    offset,
                    reason: format!("line {}: {reason}", n + 1),
                },
                other => other,
            })
        })
        .collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<InstructionTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_template_lines(&text)
}

pub fn text_templates() -> Vec<InstructionTemplate> {
    parse_template_lines(TEXT_TEMPLATES).expect("shipped text templates parse")
}

pub fn exemplar_templates() -> Vec<InstructionTemplate> {
    parse_template_lines(EXEMPLAR_TEMPLATES).expect("shipped exemplar templates parse")
}

/// Aligned tokens for one exemplar binding; blends combine their parts.
pub fn exemplar_tokens(
    exemplar: &ExemplarRef,
    image_encoder: &dyn ImageEncoder,
    layer: &AlignmentLayer,
) -> Result<VisualTokens> {
    if let Some(parts) = exemplar.blend_parts() {
        let mut groups = Vec::with_capacity(parts.len());
        let mut weights = Vec::with_capacity(parts.len());
        for (part, w) in parts {
            let grid = encode_exemplar(&part.load()?, image_encoder, layer.config())?;
            groups.push(align(&grid, layer)?);
            weights.push(*w);
        }
        return blend_exemplars(&groups, &weights);
    }
    let grid = encode_exemplar(&exemplar.load()?, image_encoder, layer.config())?;
    align(&grid, layer)
}

/// Full multimodal instruction `h`: text features with visual tokens
/// spliced in and, when `weighted`, per-slot α applied.
pub fn compose_instruction(
    bound: &BoundInstruction,
    text_encoder: &dyn TextEncoder,
    image_encoder: &dyn ImageEncoder,
    layer: Option<&AlignmentLayer>,
    padding: Padding,
    weighted: bool,
) -> Result<FeatureSequence> {
    let h_text = encode_text(bound, text_encoder, padding)?;
    let n_images = bound.template().count(SlotKind::Image);
    let h = if n_images == 0 {
        h_text
    } else {
        let layer = layer.ok_or_else(|| {
            Error::Config("instruction has <image> slots but no alignment layer is loaded".into())
        })?;
        let groups = bound
            .exemplars()
            .iter()
            .map(|e| exemplar_tokens(e, image_encoder, layer))
            .collect::<Result<Vec<_>>>()?;
        insert(&h_text, &groups)?
    };
    if weighted {
        apply_scale_weights(&h, bound)
    } else {
        Ok(h)
    }
}
