use candle_core::Tensor;

use super::align::AlignmentConfig;
use super::sequence::{FeatureSequence, SlotSpan, TokenTag};
use super::template::{BoundInstruction, SlotKind};
use crate::backends::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Only the instruction's own tokens.
    #[default]
    None,
    /// Pad with the backend's PAD token up to its context limit.
    ToMax,
}

/// Exemplar patch features `[D_in, g, g]`.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    features: Tensor,
}

impl PatchGrid {
    pub fn new(features: Tensor) -> Result<Self> {
        let (_, h, w) = features.dims3()?;
        if h != w {
            return Err(Error::Config(format!("patch grid must be square, got {h}x{w}")));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn grid(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dims()[0]
    }
}

/// Length of the common prefix and (non-overlapping) common suffix.
fn common_affixes(a: &[u32], b: &[u32]) -> (usize, usize) {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - prefix;
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    (prefix, suffix)
}

/// Encodes the bound instruction's text.
///
/// Style names are substituted; each `<image>` occupies one placeholder
/// token whose position is recorded as that slot's span. Style spans are
/// recovered by re-tokenising with the slot's name omitted and diffing.
pub fn encode_text(
    bound: &BoundInstruction,
    backend: &dyn TextEncoder,
    padding: Padding,
) -> Result<FeatureSequence> {
    let max_length = backend.max_length();
    let ids = backend.tokenize(&bound.text())?;
    if ids.len() > max_length {
        return Err(Error::Length {
            tokens: ids.len(),
            max_length,
        });
    }

    let slots = bound.template().slots();
    let mut spans = Vec::with_capacity(slots.len());

    let placeholder = backend.placeholder_id();
    let positions: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| **id == placeholder)
        .map(|(i, _)| i)
        .collect();
    let image_slots: Vec<usize> = slots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == SlotKind::Image)
        .map(|(i, _)| i)
        .collect();
    if positions.len() != image_slots.len() {
        return Err(Error::Backend(format!(
            "tokenizer produced {} placeholder tokens for {} image slots",
            positions.len(),
            image_slots.len()
        )));
    }
    for (slot, pos) in image_slots.into_iter().zip(positions) {
        spans.push(SlotSpan {
            slot,
            kind: SlotKind::Image,
            range: pos..pos + 1,
        });
    }

    for (slot, s) in slots.iter().enumerate() {
        if s.kind != SlotKind::Style {
            continue;
        }
        let without = backend.tokenize(&bound.render_omitting(Some(slot)))?;
        let (prefix, suffix) = common_affixes(&ids, &without);
        let end = ids.len() - suffix;
        if end > prefix && ids.len() > without.len() {
            spans.push(SlotSpan {
                slot,
                kind: SlotKind::Style,
                range: prefix..end,
            });
        }
        // An unrecoverable span is left out; weighting reports it.
    }
    spans.sort_by_key(|s| s.range.start);

    let mut all_ids = ids.clone();
    let mut tags = vec![TokenTag::Text; ids.len()];
    if padding == Padding::ToMax {
        all_ids.resize(max_length, backend.pad_id());
        tags.resize(max_length, TokenTag::Pad);
    }
    let embeddings = backend.hidden_states(&all_ids)?;
    FeatureSequence::new(embeddings, tags, spans, max_length)
}

/// Features of the empty instruction, used as the null text condition.
pub fn encode_null_text(backend: &dyn TextEncoder, padding: Padding) -> Result<FeatureSequence> {
    let max_length = backend.max_length();
    let (ids, tags) = match padding {
        Padding::None => (vec![], vec![]),
        Padding::ToMax => (
            vec![backend.pad_id(); max_length],
            vec![TokenTag::Pad; max_length],
        ),
    };
    let embeddings = if ids.is_empty() {
        Tensor::zeros((0, backend.hidden_dim()), candle_core::DType::F32, &candle_core::Device::Cpu)?
    } else {
        backend.hidden_states(&ids)?
    };
    FeatureSequence::new(embeddings, tags, vec![], max_length)
}

/// Patch features of an exemplar, checked against the alignment geometry.
pub fn encode_exemplar(
    image: &Image,
    backend: &dyn ImageEncoder,
    cfg: &AlignmentConfig,
) -> Result<PatchGrid> {
    let grid = PatchGrid::new(backend.patch_grid(image)?)?;
    if grid.grid() != cfg.input_grid {
        return Err(Error::Config(format!(
            "image encoder emits a {g}x{g} grid but the alignment layer expects {e}x{e}",
            g = grid.grid(),
            e = cfg.input_grid
        )));
    }
    if grid.feature_dim() != cfg.feature_dim_in {
        return Err(Error::Config(format!(
            "image encoder emits {}-dim patches but the alignment layer expects {}",
            grid.feature_dim(),
            cfg.feature_dim_in
        )));
    }
    Ok(grid)
}
