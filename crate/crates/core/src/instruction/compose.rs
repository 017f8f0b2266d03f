//! Splicing visual tokens into text features, per-slot scale weighting and
//! exemplar blending.

use candle_core::Tensor;

use super::align::VisualTokens;
use super::sequence::{FeatureSequence, SlotSpan, TokenTag};
use super::template::{BoundInstruction, SlotKind};
use crate::error::{Error, Result};

/// Replaces each image placeholder with its group of visual tokens.
///
/// Groups are matched to placeholders in positional order. When the result
/// exceeds the context limit, trailing PAD tokens are dropped; if that is
/// not enough the call fails rather than truncating content.
pub fn insert(h_text: &FeatureSequence, groups: &[VisualTokens]) -> Result<FeatureSequence> {
    let placeholders: Vec<SlotSpan> = h_text.placeholder_spans().into_iter().cloned().collect();
    if placeholders.len() != groups.len() {
        return Err(Error::Insertion(format!(
            "{} placeholders but {} visual groups",
            placeholders.len(),
            groups.len()
        )));
    }
    if groups.is_empty() {
        return Ok(h_text.clone());
    }
    let d = h_text.dim();
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Insertion(format!("visual group {i} is empty")));
        }
        if g.dim() != d {
            return Err(Error::Insertion(format!(
                "visual group {i} has dim {} but the text features have dim {d}",
                g.dim()
            )));
        }
    }

    let emb = h_text.embeddings();
    let old_tags = h_text.tags();
    let mut pieces: Vec<Tensor> = Vec::with_capacity(2 * groups.len() + 1);
    let mut tags: Vec<TokenTag> = Vec::with_capacity(h_text.len() + 9 * groups.len());
    let mut new_spans: Vec<SlotSpan> = Vec::with_capacity(h_text.spans().len());
    // (old position of placeholder, shift applied to tokens after it)
    let mut shifts: Vec<(usize, isize)> = Vec::with_capacity(groups.len());
    let mut cursor = 0usize;
    let mut shift = 0isize;
    for (ph, group) in placeholders.iter().zip(groups) {
        let pos = ph.range.start;
        if pos > cursor {
            pieces.push(emb.narrow(0, cursor, pos - cursor)?);
            tags.extend_from_slice(&old_tags[cursor..pos]);
        }
        let start = tags.len();
        pieces.push(group.tokens().to_dtype(emb.dtype())?);
        tags.extend(std::iter::repeat_n(TokenTag::Visual(ph.slot), group.len()));
        new_spans.push(SlotSpan {
            slot: ph.slot,
            kind: SlotKind::Image,
            range: start..tags.len(),
        });
        shift += group.len() as isize - 1;
        shifts.push((pos, shift));
        cursor = pos + 1;
    }
    if cursor < h_text.len() {
        pieces.push(emb.narrow(0, cursor, h_text.len() - cursor)?);
        tags.extend_from_slice(&old_tags[cursor..]);
    }

    let placeholder_slots: Vec<usize> = placeholders.iter().map(|p| p.slot).collect();
    for span in h_text.spans() {
        if placeholder_slots.contains(&span.slot) {
            continue;
        }
        let delta = shifts
            .iter()
            .rev()
            .find(|(pos, _)| *pos < span.range.start)
            .map(|(_, s)| *s)
            .unwrap_or(0);
        let start = (span.range.start as isize + delta) as usize;
        let end = (span.range.end as isize + delta) as usize;
        new_spans.push(SlotSpan {
            slot: span.slot,
            kind: span.kind,
            range: start..end,
        });
    }
    new_spans.sort_by_key(|s| s.range.start);

    let refs: Vec<&Tensor> = pieces.iter().collect();
    let mut embeddings = Tensor::cat(&refs, 0)?;
    let max_length = h_text.max_length();
    if tags.len() > max_length {
        let trailing_pad = tags.iter().rev().take_while(|t| **t == TokenTag::Pad).count();
        let excess = tags.len() - max_length;
        if excess > trailing_pad {
            return Err(Error::Overflow {
                needed: tags.len() - trailing_pad,
                max_length,
                dropped_pad: trailing_pad,
            });
        }
        tags.truncate(max_length);
        embeddings = embeddings.narrow(0, 0, max_length)?;
    }
    FeatureSequence::new(embeddings, tags, new_spans, max_length)
}

/// Multiplies each slot's token span by its α; every other token is left
/// untouched.
pub fn apply_scale_weights(h: &FeatureSequence, bound: &BoundInstruction) -> Result<FeatureSequence> {
    let slots = bound.template().slots();
    let alphas = bound.weights().alphas();
    if alphas.len() != slots.len() {
        return Err(Error::Weighting(format!(
            "{} scale weights for {} style elements",
            alphas.len(),
            slots.len()
        )));
    }
    let mut scale = vec![1.0f64; h.len()];
    for (i, (slot, alpha)) in slots.iter().zip(alphas).enumerate() {
        let span = h.span_for(i).ok_or_else(|| {
            Error::Weighting(format!(
                "no token span for {} slot {i}; the tokenizer lost alignment",
                slot.kind.name()
            ))
        })?;
        if slot.kind == SlotKind::Image && h.tags()[span.range.start] != TokenTag::Visual(i) {
            return Err(Error::Weighting(format!(
                "image slot {i} has no inserted visual tokens"
            )));
        }
        for s in &mut scale[span.range.clone()] {
            *s = *alpha as f64;
        }
    }
    let emb = h.embeddings();
    let col = Tensor::from_vec(scale, (h.len(), 1), emb.device())?.to_dtype(emb.dtype())?;
    h.with_embeddings(emb.broadcast_mul(&col)?)
}

/// Convex combination of aligned token groups with weights normalised to
/// sum to one.
pub fn blend_exemplars(groups: &[VisualTokens], weights: &[f32]) -> Result<VisualTokens> {
    if groups.is_empty() {
        return Err(Error::Blend("no groups to blend".into()));
    }
    if groups.len() != weights.len() {
        return Err(Error::Blend(format!(
            "{} groups but {} weights",
            groups.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Blend(format!("weights must be finite and non-negative, got {w}")));
    }
    let sum: f64 = weights.iter().map(|w| *w as f64).sum();
    if sum <= 0.0 {
        return Err(Error::Blend("weights sum to zero".into()));
    }
    let shape = groups[0].tokens().dims().to_vec();
    if let Some(g) = groups.iter().find(|g| g.tokens().dims() != shape.as_slice()) {
        return Err(Error::Blend(format!(
            "group shape {:?} differs from {:?}",
            g.tokens().dims(),
            shape
        )));
    }
    let mut acc = groups[0].tokens().affine(weights[0] as f64 / sum, 0.0)?;
    for (g, w) in groups.iter().zip(weights).skip(1) {
        acc = (acc + g.tokens().affine(*w as f64 / sum, 0.0)?)?;
    }
    VisualTokens::new(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::template::{bind, parse_template, ScaleWeights};
    use candle_core::Device;

    fn seq(tags: Vec<TokenTag>, spans: Vec<SlotSpan>, max_length: usize) -> FeatureSequence {
        let l = tags.len();
        let v: Vec<f32> = (0..l * 2).map(|i| i as f32 + 1.0).collect();
        let emb = Tensor::from_vec(v, (l, 2), &Device::Cpu).unwrap();
        FeatureSequence::new(emb, tags, spans, max_length).unwrap()
    }

    fn group(n: usize, fill: f32) -> VisualTokens {
        VisualTokens::new(Tensor::full(fill, (n, 2), &Device::Cpu).unwrap()).unwrap()
    }

    fn image_span(slot: usize, pos: usize) -> SlotSpan {
        SlotSpan {
            slot,
            kind: SlotKind::Image,
            range: pos..pos + 1,
        }
    }

    #[test]
    fn nine_tokens_one_placeholder() {
        let h = seq(vec![TokenTag::Text; 9], vec![image_span(0, 8)], 77);
        let out = insert(&h, &[group(9, -1.0)]).unwrap();
        assert_eq!(out.len(), 17);
        assert_eq!(out.span_for(0).unwrap().range, 8..17);
        assert!(out.tags()[8..].iter().all(|t| *t == TokenTag::Visual(0)));
    }

    #[test]
    fn zero_placeholders_is_identity() {
        let h = seq(vec![TokenTag::Text; 5], vec![], 77);
        let out = insert(&h, &[]).unwrap();
        assert_eq!(
            out.embeddings().to_vec2::<f32>().unwrap(),
            h.embeddings().to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn group_count_mismatch() {
        let h = seq(vec![TokenTag::Text; 5], vec![image_span(0, 2)], 77);
        assert!(matches!(insert(&h, &[]), Err(Error::Insertion(_))));
    }

    #[test]
    fn overflow_drops_pad_first() {
        let mut tags = vec![TokenTag::Text; 4];
        tags.extend([TokenTag::Pad; 8]);
        let h = seq(tags, vec![image_span(0, 3)], 12);
        let out = insert(&h, &[group(9, 0.0)]).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!(out.tags().iter().filter(|t| **t == TokenTag::Pad).count(), 0);

        let mut tags = vec![TokenTag::Text; 4];
        tags.extend([TokenTag::Pad; 2]);
        let h = seq(tags, vec![image_span(0, 3)], 6);
        assert!(matches!(
            insert(&h, &[group(9, 0.0)]),
            Err(Error::Overflow { needed: 12, max_length: 6, dropped_pad: 2 })
        ));
    }

    #[test]
    fn style_spans_shift_past_insertions() {
        let tags = vec![TokenTag::Text; 6];
        let spans = vec![
            image_span(0, 1),
            SlotSpan {
                slot: 1,
                kind: SlotKind::Style,
                range: 3..5,
            },
        ];
        let h = seq(tags, spans, 77);
        let out = insert(&h, &[group(9, 0.0)]).unwrap();
        assert_eq!(out.span_for(1).unwrap().range, 11..13);
        let before = h.embeddings().to_vec2::<f32>().unwrap();
        let after = out.embeddings().to_vec2::<f32>().unwrap();
        assert_eq!(before[3..5], after[11..13]);
    }

    #[test]
    fn scale_weights_identity_and_annihilation() {
        let t = parse_template("make <style> art").unwrap();
        let h = seq(
            vec![TokenTag::Text; 3],
            vec![SlotSpan {
                slot: 0,
                kind: SlotKind::Style,
                range: 1..2,
            }],
            77,
        );
        let b = bind(t.clone(), vec!["ink".into()], vec![], ScaleWeights::default()).unwrap();
        let same = apply_scale_weights(&h, &b).unwrap();
        assert_eq!(
            same.embeddings().to_vec2::<f32>().unwrap(),
            h.embeddings().to_vec2::<f32>().unwrap()
        );
        let b0 = bind(t, vec!["ink".into()], vec![], ScaleWeights::new(vec![0.0]).unwrap()).unwrap();
        let zero = apply_scale_weights(&h, &b0).unwrap().embeddings().to_vec2::<f32>().unwrap();
        assert_eq!(zero[1], vec![0.0, 0.0]);
        assert_eq!(zero[0], vec![1.0, 2.0]);
    }

    #[test]
    fn missing_style_span_is_weighting_error() {
        let t = parse_template("make <style> art").unwrap();
        let b = bind(t, vec!["ink".into()], vec![], ScaleWeights::default()).unwrap();
        let h = seq(vec![TokenTag::Text; 3], vec![], 77);
        assert!(matches!(apply_scale_weights(&h, &b), Err(Error::Weighting(_))));
    }

    #[test]
    fn blend_degenerate_and_symmetric() {
        let a = group(3, 2.0);
        let b = group(3, 4.0);
        let first = blend_exemplars(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap();
        assert_eq!(
            first.tokens().to_vec2::<f32>().unwrap(),
            a.tokens().to_vec2::<f32>().unwrap()
        );
        let half = blend_exemplars(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap();
        let doubled = blend_exemplars(&[a.clone(), b.clone()], &[2.0, 2.0]).unwrap();
        assert!(half
            .tokens()
            .to_vec2::<f32>()
            .unwrap()
            .iter()
            .flatten()
            .all(|v| *v == 3.0));
        assert_eq!(
            half.tokens().to_vec2::<f32>().unwrap(),
            doubled.tokens().to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn blend_rejects_bad_inputs() {
        let a = group(3, 1.0);
        assert!(blend_exemplars(&[a.clone(), group(2, 1.0)], &[1.0, 1.0]).is_err());
        assert!(blend_exemplars(&[a.clone()], &[-1.0]).is_err());
        assert!(blend_exemplars(&[a.clone()], &[0.0]).is_err());
        assert!(blend_exemplars(&[], &[]).is_err());
    }
}
