//! Instruction templates with `<style>` / `<image>` identifier slots and
//! their binding to concrete style names, exemplars and scale weights.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const STYLE_IDENT: &str = "<style>";
pub const IMAGE_IDENT: &str = "<image>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SlotKind {
    Style,
    Image,
}

impl SlotKind {
    pub fn literal(self) -> &'static str {
        match self {
            SlotKind::Style => STYLE_IDENT,
            SlotKind::Image => IMAGE_IDENT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Style => "style",
            SlotKind::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: SlotKind,
    /// Byte range of the identifier literal in the raw text.
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    raw: String,
    slots: Vec<Slot>,
}

impl InstructionTemplate {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Slots in positional order.
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn count(&self, kind: SlotKind) -> usize {
        self.slots.iter().filter(|s| s.kind == kind).count()
    }

    pub fn is_plain(&self) -> bool {
        self.slots.is_empty()
    }

    /// Renders the template, asking `fill` for the text of each slot.
    pub(crate) fn render_with(&self, mut fill: impl FnMut(usize, &Slot) -> String) -> String {
        let mut out = String::with_capacity(self.raw.len() + 16);
        let mut cursor = 0;
        for (i, slot) in self.slots.iter().enumerate() {
            out.push_str(&self.raw[cursor..slot.range.start]);
            out.push_str(&fill(i, slot));
            cursor = slot.range.end;
        }
        out.push_str(&self.raw[cursor..]);
        out
    }
}

impl std::fmt::Display for InstructionTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Locates every identifier in `text`.
///
/// A `<` followed by letters and `>` must spell one of the two identifiers;
/// a `<` followed by a prefix of an identifier that never closes is an
/// unclosed identifier. Any other `<` is ordinary text.
pub fn parse_template(text: &str) -> Result<InstructionTemplate> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            offset: 0,
            reason: "instruction text is empty".into(),
        });
    }
    let bytes = text.as_bytes();
    let mut slots = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let start = i;
        let mut j = i + 1;
        while j < bytes.len() && bytes[j].is_ascii_alphabetic() {
            j += 1;
        }
        let word = &text[start + 1..j];
        if j < bytes.len() && bytes[j] == b'>' && !word.is_empty() {
            let kind = match word {
                "style" => SlotKind::Style,
                "image" => SlotKind::Image,
                other => {
                    return Err(Error::Parse {
                        offset: start,
                        reason: format!("unknown identifier `<{other}>`"),
                    })
                }
            };
            slots.push(Slot {
                kind,
                range: start..j + 1,
            });
            i = j + 1;
        } else {
            let is_prefix = !word.is_empty() && ("style".starts_with(word) || "image".starts_with(word));
            let full_word = word == "style" || word == "image";
            if is_prefix || full_word {
                return Err(Error::Parse {
                    offset: start,
                    reason: format!("unclosed identifier `<{word}`"),
                });
            }
            i = start + 1;
        }
    }
    Ok(InstructionTemplate {
        raw: text.to_string(),
        slots,
    })
}

/// Multiplicative weights, one per style element (slot), in slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ScaleWeights(Vec<f32>);

impl ScaleWeights {
    pub const DEFAULT_ALPHA: f32 = 1.0;
    pub const RECOMMENDED_RANGE: (f32, f32) = (0.5, 1.5);

    pub fn new(alphas: Vec<f32>) -> Result<Self> {
        if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
            return Err(Error::Weighting(format!("non-finite scale weight {a}")));
        }
        Ok(Self(alphas))
    }

    pub fn unit(n: usize) -> Self {
        Self(vec![Self::DEFAULT_ALPHA; n])
    }

    pub fn alphas(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|a| *a == Self::DEFAULT_ALPHA)
    }
}

#[derive(Clone)]
enum ExemplarSource {
    Path(PathBuf),
    Inline(Arc<Image>),
    Blend(Vec<(ExemplarRef, f32)>),
}

/// Reference to an exemplar image bound to an `<image>` slot.
///
/// A blend reference combines several exemplars' aligned tokens with
/// normalised weights.
#[derive(Clone)]
pub struct ExemplarRef {
    id: String,
    source: ExemplarSource,
}

impl std::fmt::Debug for ExemplarRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.source {
            ExemplarSource::Path(p) => format!("path:{}", p.display()),
            ExemplarSource::Inline(_) => "inline".to_string(),
            ExemplarSource::Blend(parts) => format!("blend:{}", parts.len()),
        };
        write!(f, "ExemplarRef({}, {kind})", self.id)
    }
}

impl ExemplarRef {
    pub fn from_path(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            source: ExemplarSource::Path(path.into()),
        }
    }

    pub fn inline(id: impl Into<String>, image: Image) -> Self {
        Self {
            id: id.into(),
            source: ExemplarSource::Inline(Arc::new(image)),
        }
    }

    pub fn blend(id: impl Into<String>, parts: Vec<(ExemplarRef, f32)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Blend("blend needs at least one exemplar".into()));
        }
        if parts.iter().any(|(p, _)| p.blend_parts().is_some()) {
            return Err(Error::Blend("nested blends are not supported".into()));
        }
        Ok(Self {
            id: id.into(),
            source: ExemplarSource::Blend(parts),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.source {
            ExemplarSource::Path(p) => Some(p),
            _ => None,
        }
    }

    pub fn blend_parts(&self) -> Option<&[(ExemplarRef, f32)]> {
        match &self.source {
            ExemplarSource::Blend(parts) => Some(parts),
            _ => None,
        }
    }

    /// Loads the referenced image. Blends have no single image.
    pub fn load(&self) -> Result<Image> {
        match &self.source {
            ExemplarSource::Path(p) => Image::load(p),
            ExemplarSource::Inline(img) => Ok((**img).clone()),
            ExemplarSource::Blend(_) => Err(Error::Input(format!(
                "exemplar `{}` is a blend; load its parts",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundInstruction {
    template: InstructionTemplate,
    styles: Vec<String>,
    exemplars: Vec<ExemplarRef>,
    weights: ScaleWeights,
}

/// Binds style names and exemplars to the template's slots.
///
/// An empty weight vector means every slot uses the default α of 1.0.
pub fn bind(
    template: InstructionTemplate,
    styles: Vec<String>,
    exemplars: Vec<ExemplarRef>,
    weights: ScaleWeights,
) -> Result<BoundInstruction> {
    let n_style = template.count(SlotKind::Style);
    let n_image = template.count(SlotKind::Image);
    if styles.len() != n_style {
        return Err(Error::Binding {
            kind: "style",
            expected: n_style,
            given: styles.len(),
        });
    }
    if exemplars.len() != n_image {
        return Err(Error::Binding {
            kind: "image",
            expected: n_image,
            given: exemplars.len(),
        });
    }
    for s in &styles {
        if s.trim().is_empty() {
            return Err(Error::InvalidBinding("style name is empty".into()));
        }
        if s.contains(STYLE_IDENT) || s.contains(IMAGE_IDENT) {
            return Err(Error::InvalidBinding(format!(
                "style name `{s}` contains an identifier literal"
            )));
        }
    }
    let n_slots = template.slots().len();
    let weights = if weights.is_empty() {
        ScaleWeights::unit(n_slots)
    } else if weights.len() != n_slots {
        return Err(Error::Binding {
            kind: "scale weight",
            expected: n_slots,
            given: weights.len(),
        });
    } else {
        weights
    };
    Ok(BoundInstruction {
        template,
        styles,
        exemplars,
        weights,
    })
}

impl BoundInstruction {
    /// Plain instruction without slots.
    pub fn plain(text: &str) -> Result<Self> {
        bind(parse_template(text)?, vec![], vec![], ScaleWeights::default())
    }

    pub fn template(&self) -> &InstructionTemplate {
        &self.template
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    pub fn exemplars(&self) -> &[ExemplarRef] {
        &self.exemplars
    }

    pub fn weights(&self) -> &ScaleWeights {
        &self.weights
    }

    pub fn with_weights(mut self, weights: ScaleWeights) -> Result<Self> {
        if weights.len() != self.template.slots().len() {
            return Err(Error::Binding {
                kind: "scale weight",
                expected: self.template.slots().len(),
                given: weights.len(),
            });
        }
        self.weights = weights;
        Ok(self)
    }

    /// Style name bound to slot `slot` (a global slot index), if it is a
    /// style slot.
    pub fn style_for_slot(&self, slot: usize) -> Option<&str> {
        self.ordinal(slot, SlotKind::Style)
            .map(|k| self.styles[k].as_str())
    }

    pub fn exemplar_for_slot(&self, slot: usize) -> Option<&ExemplarRef> {
        self.ordinal(slot, SlotKind::Image).map(|k| &self.exemplars[k])
    }

    fn ordinal(&self, slot: usize, kind: SlotKind) -> Option<usize> {
        let slots = self.template.slots();
        if slots.get(slot)?.kind != kind {
            return None;
        }
        Some(slots[..slot].iter().filter(|s| s.kind == kind).count())
    }

    /// Text with style names substituted and `<image>` kept as a
    /// placeholder.
    pub fn text(&self) -> String {
        self.render_omitting(None)
    }

    /// Same as [`BoundInstruction::text`] but with style slot `omit`
    /// rendered empty; used to recover that slot's token span.
    pub(crate) fn render_omitting(&self, omit: Option<usize>) -> String {
        let mut style_k = 0;
        self.template.render_with(|i, slot| match slot.kind {
            SlotKind::Style => {
                let name = self.styles[style_k].clone();
                style_k += 1;
                if Some(i) == omit {
                    String::new()
                } else {
                    name
                }
            }
            SlotKind::Image => IMAGE_IDENT.to_string(),
        })
    }
}
