use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{ImagePair, Verdict};
use crate::backends::{cosine, ImageEncoder};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self { lower: 0.2, upper: 0.84 }
    }
}

impl FilterThresholds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let t = Self { lower, upper };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::Config(format!(
                "filter thresholds need lower < upper, got {} and {}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    /// Both bounds are inclusive.
    pub fn verdict(&self, similarity: f64) -> Verdict {
        if similarity.is_nan() {
            Verdict::Fail
        } else if similarity > self.upper {
            Verdict::TooSimilar
        } else if similarity < self.lower {
            Verdict::TooDifferent
        } else {
            Verdict::Pass
        }
    }
}

/// Scores how alike the two images of a pair are.
pub trait PairScorer: Send + Sync {
    /// `root` resolves run-relative image paths.
    fn score(&self, pair: &ImagePair, root: &Path) -> Result<f64>;
}

/// Cosine between image-encoder embeddings of source and target.
pub struct EmbeddingScorer {
    encoder: Arc<dyn ImageEncoder>,
}

impl EmbeddingScorer {
    pub fn new(encoder: Arc<dyn ImageEncoder>) -> Self {
        Self { encoder }
    }

    pub fn similarity(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(cosine(&self.encoder.embed(a)?, &self.encoder.embed(b)?))
    }
}

impl PairScorer for EmbeddingScorer {
    fn score(&self, pair: &ImagePair, root: &Path) -> Result<f64> {
        let a = Image::load(&root.join(&pair.source_ref))?;
        let b = Image::load(&root.join(&pair.target_ref))?;
        self.similarity(&a, &b)
    }
}

/// Precomputed similarities keyed by pair id.
#[derive(Debug, Clone, Default)]
pub struct TableScorer(pub HashMap<String, f64>);

impl PairScorer for TableScorer {
    fn score(&self, pair: &ImagePair, _root: &Path) -> Result<f64> {
        self.0
            .get(&pair.id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("no similarity for pair `{}`", pair.id)))
    }
}

fn reason(verdict: Verdict, s: f64, t: &FilterThresholds) -> String {
    match verdict {
        Verdict::Pass => format!("{s:.4} within [{}, {}]", t.lower, t.upper),
        Verdict::TooSimilar => format!("{s:.4} above {}", t.upper),
        Verdict::TooDifferent => format!("{s:.4} below {}", t.lower),
        Verdict::Fail => "similarity is not a number".into(),
    }
}

/// Scores and judges one pair; scoring errors become a FAIL verdict.
pub fn judge(mut pair: ImagePair, thresholds: &FilterThresholds, scorer: &dyn PairScorer, root: &Path) -> ImagePair {
    match scorer.score(&pair, root) {
        Ok(s) if !s.is_nan() => {
            let s = s.clamp(-1.0, 1.0);
            let v = thresholds.verdict(s);
            pair.similarity = Some(s);
            pair.verdict = Some(v);
            pair.reason = Some(reason(v, s, thresholds));
        }
        Ok(_) => {
            pair.similarity = None;
            pair.verdict = Some(Verdict::Fail);
            pair.reason = Some("similarity is not a number".into());
        }
        Err(e) => {
            pair.similarity = None;
            pair.verdict = Some(Verdict::Fail);
            pair.reason = Some(format!("unscorable: {e}"));
        }
    }
    pair
}

pub fn filter_pairs(
    pairs: Vec<ImagePair>,
    thresholds: &FilterThresholds,
    scorer: &dyn PairScorer,
    root: &Path,
) -> Result<Vec<ImagePair>> {
    thresholds.validate()?;
    Ok(pairs.into_par_iter().map(|p| judge(p, thresholds, scorer, root)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, f64)]) -> (Vec<ImagePair>, TableScorer) {
        let pairs = entries.iter().map(|(id, _)| ImagePair::new(id, "s", "t", "x", "A1")).collect();
        let t = TableScorer(entries.iter().map(|(id, s)| (id.to_string(), *s)).collect());
        (pairs, t)
    }

    #[test]
    fn threshold_examples() {
        let t = FilterThresholds::default();
        assert_eq!(t.verdict(0.90), Verdict::TooSimilar);
        assert_eq!(t.verdict(0.10), Verdict::TooDifferent);
        assert_eq!(t.verdict(0.50), Verdict::Pass);
        assert_eq!(t.verdict(0.2), Verdict::Pass);
        assert_eq!(t.verdict(0.84), Verdict::Pass);
    }

    #[test]
    fn bad_thresholds() {
        assert!(FilterThresholds::new(0.5, 0.5).is_err());
        assert!(FilterThresholds::new(0.9, 0.1).is_err());
    }

    #[test]
    fn unscorable_pair_fails_with_reason() {
        let (mut pairs, scorer) = table(&[("a", 0.5)]);
        pairs.push(ImagePair::new("missing", "s", "t", "x", "A1"));
        let out = filter_pairs(pairs, &FilterThresholds::default(), &scorer, Path::new(".")).unwrap();
        assert_eq!(out[0].verdict, Some(Verdict::Pass));
        assert_eq!(out[1].verdict, Some(Verdict::Fail));
        assert!(out[1].reason.as_deref().unwrap().contains("missing"));
        for p in &out {
            p.validate().unwrap();
        }
    }

    #[test]
    fn embedding_scorer_on_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(8, 8, [0.1, 0.6, 0.3]).unwrap();
        img.save_png(&dir.path().join("a.png")).unwrap();
        img.save_png(&dir.path().join("b.png")).unwrap();
        let enc = crate::backends::Backends::toy(&Default::default()).image;
        let s = EmbeddingScorer::new(enc);
        let p = ImagePair::new("p", "a.png", "b.png", "x", "A1");
        let out = judge(p, &FilterThresholds::default(), &s, dir.path());
        assert!((out.similarity.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(out.verdict, Some(Verdict::TooSimilar));
    }
}
