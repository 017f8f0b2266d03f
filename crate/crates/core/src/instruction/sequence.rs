use std::ops::Range;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::template::SlotKind;
use crate::error::{Error, Result};

/// Provenance of one token in a feature sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenTag {
    Text,
    /// Aligned exemplar token for the given (global) slot index.
    Visual(usize),
    Pad,
}

/// Token span belonging to one instruction slot: the style-name tokens for
/// a style slot, the placeholder (before insertion) or the visual tokens
/// (after insertion) for an image slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpan {
    pub slot: usize,
    pub kind: SlotKind,
    pub range: Range<usize>,
}

/// Hidden-space instruction features `[L, D]` with per-token provenance.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    embeddings: Tensor,
    tags: Vec<TokenTag>,
    spans: Vec<SlotSpan>,
    max_length: usize,
}

impl FeatureSequence {
    pub fn new(
        embeddings: Tensor,
        tags: Vec<TokenTag>,
        spans: Vec<SlotSpan>,
        max_length: usize,
    ) -> Result<Self> {
        let (l, _) = embeddings.dims2()?;
        if l != tags.len() {
            return Err(Error::Insertion(format!(
                "{l} embeddings but {} provenance tags",
                tags.len()
            )));
        }
        for s in &spans {
            if s.range.end > l || s.range.start > s.range.end {
                return Err(Error::Insertion(format!(
                    "span {:?} of slot {} outside a {l}-token sequence",
                    s.range, s.slot
                )));
            }
        }
        Ok(Self {
            embeddings,
            tags,
            spans,
            max_length,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn tags(&self) -> &[TokenTag] {
        &self.tags
    }

    pub fn spans(&self) -> &[SlotSpan] {
        &self.spans
    }

    pub fn span_for(&self, slot: usize) -> Option<&SlotSpan> {
        self.spans.iter().find(|s| s.slot == slot)
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[1]
    }

    /// Positions of image placeholders still awaiting insertion, in order.
    pub fn placeholder_spans(&self) -> Vec<&SlotSpan> {
        let mut v: Vec<&SlotSpan> = self
            .spans
            .iter()
            .filter(|s| s.kind == SlotKind::Image && self.tags[s.range.start] != TokenTag::Visual(s.slot))
            .collect();
        v.sort_by_key(|s| s.range.start);
        v
    }

    pub(crate) fn with_embeddings(&self, embeddings: Tensor) -> Result<Self> {
        if embeddings.dims() != self.embeddings.dims() {
            return Err(Error::Weighting(format!(
                "replacement embeddings {:?} do not match {:?}",
                embeddings.dims(),
                self.embeddings.dims()
            )));
        }
        Ok(Self {
            embeddings,
            ..self.clone()
        })
    }

    /// Appends `pad` rows (tagged PAD) until the sequence has `len` tokens.
    pub fn pad_to(&self, len: usize, pad: &Tensor) -> Result<Self> {
        let l = self.len();
        if l >= len {
            return Ok(self.clone());
        }
        let d = self.dim();
        let row = pad.reshape((1, d))?.to_dtype(self.embeddings.dtype())?;
        let fill = row.broadcast_as((len - l, d))?.contiguous()?;
        let embeddings = Tensor::cat(&[&self.embeddings, &fill], 0)?;
        let mut tags = self.tags.clone();
        tags.extend(std::iter::repeat_n(TokenTag::Pad, len - l));
        Self::new(embeddings, tags, self.spans.clone(), self.max_length)
    }
}
