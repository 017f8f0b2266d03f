//! Per-style exemplar ranking: every image gets the other images of its
//! style sorted by embedding similarity, and training draws an exemplar
//! uniformly from the top-k.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{cosine, ImageEncoder};
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_TOP_K: usize = 10;

/// Similarities and rankings within one style.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleIndex {
    style: String,
    ids: Vec<String>,
    /// Row-major `n × n` cosine matrix; the diagonal is 1 by definition.
    sim: Vec<f64>,
    /// Per image: other images, most similar first.
    ranked: Vec<Vec<usize>>,
}

impl StyleIndex {
    fn from_matrix(style: String, ids: Vec<String>, sim: Vec<f64>) -> Self {
        let n = ids.len();
        let ranked = (0..n)
            .map(|i| {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| {
                    sim[i * n + b]
                        .total_cmp(&sim[i * n + a])
                        .then_with(|| ids[a].cmp(&ids[b]))
                });
                others
            })
            .collect();
        Self { style, ids, sim, ranked }
    }

    pub fn style(&self) -> &str {
        &self.style
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn similarity(&self, a: &str, b: &str) -> Option<f64> {
        let n = self.len();
        Some(self.sim[self.position(a)? * n + self.position(b)?])
    }

    /// Ranked `(id, similarity)` candidates for `id`.
    pub fn candidates(&self, id: &str) -> Option<Vec<(&str, f64)>> {
        let i = self.position(id)?;
        let n = self.len();
        Some(
            self.ranked[i]
                .iter()
                .map(|&j| (self.ids[j].as_str(), self.sim[i * n + j]))
                .collect(),
        )
    }
}

/// Builds the ranking for one style from precomputed embeddings.
pub fn rank_exemplars(style: &str, embeddings: &[(String, Vec<f32>)]) -> Result<StyleIndex> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Dataset(format!(
            "style `{style}` has {n} image(s); at least two are needed to pick an exemplar"
        )));
    }
    let mut seen = HashSet::new();
    for (id, _) in embeddings {
        if !seen.insert(id.as_str()) {
            return Err(Error::Dataset(format!("duplicate image id `{id}` in style `{style}`")));
        }
    }
    let sim: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                1.0
            } else {
                cosine(&embeddings[i].1, &embeddings[j].1)
            }
        })
        .collect();
    Ok(StyleIndex::from_matrix(
        style.to_string(),
        embeddings.iter().map(|(id, _)| id.clone()).collect(),
        sim,
    ))
}

/// Embeds images with `encoder` and ranks them.
pub fn rank_images(style: &str, images: &[(String, Image)], encoder: &dyn ImageEncoder) -> Result<StyleIndex> {
    let embeddings = images
        .par_iter()
        .map(|(id, img)| Ok((id.clone(), encoder.embed(img)?)))
        .collect::<Result<Vec<_>>>()?;
    rank_exemplars(style, &embeddings)
}

/// One line of the persisted index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexLine {
    pub style: String,
    pub image: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
}

/// Rankings for every style.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarIndex {
    styles: BTreeMap<String, StyleIndex>,
}

impl ExemplarIndex {
    /// Builds per-style indexes in parallel.
    pub fn build(per_style: &BTreeMap<String, Vec<(String, Vec<f32>)>>) -> Result<Self> {
        let styles = per_style
            .par_iter()
            .map(|(s, e)| Ok((s.clone(), rank_exemplars(s, e)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { styles })
    }

    pub fn insert(&mut self, index: StyleIndex) {
        self.styles.insert(index.style.clone(), index);
    }

    pub fn style(&self, name: &str) -> Option<&StyleIndex> {
        self.styles.get(name)
    }

    pub fn styles(&self) -> impl Iterator<Item = &StyleIndex> {
        self.styles.values()
    }

    /// The style that contains `image_id`.
    pub fn find(&self, image_id: &str) -> Option<&StyleIndex> {
        self.styles.values().find(|s| s.position(image_id).is_some())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for s in self.styles.values() {
            for id in &s.ids {
                let cands = s.candidates(id).unwrap_or_default();
                let line = IndexLine {
                    style: s.style.clone(),
                    image: id.clone(),
                    candidates: cands.iter().map(|(c, _)| c.to_string()).collect(),
                    scores: cands.iter().map(|(_, v)| *v).collect(),
                };
                serde_json::to_writer(&mut out, &line)?;
                out.push(b'\n');
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Restores an index written by [`ExemplarIndex::write_jsonl`].
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut groups: BTreeMap<String, Vec<IndexLine>> = BTreeMap::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: IndexLine = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if rec.candidates.len() != rec.scores.len() {
                return Err(Error::Dataset(format!(
                    "{}:{}: candidates and scores differ in length",
                    path.display(),
                    n + 1
                )));
            }
            groups.entry(rec.style.clone()).or_default().push(rec);
        }
        let mut styles = BTreeMap::new();
        for (style, lines) in groups {
            let ids: Vec<String> = lines.iter().map(|l| l.image.clone()).collect();
            let n = ids.len();
            let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut sim = vec![1.0; n * n];
            for (i, l) in lines.iter().enumerate() {
                if l.candidates.len() != n - 1 {
                    return Err(Error::Dataset(format!(
                        "index line for `{}` lists {} candidates, style has {} other images",
                        l.image,
                        l.candidates.len(),
                        n - 1
                    )));
                }
                for (c, s) in l.candidates.iter().zip(&l.scores) {
                    let j = *pos
                        .get(c.as_str())
                        .ok_or_else(|| Error::Dataset(format!("unknown candidate `{c}`")))?;
                    sim[i * n + j] = *s;
                }
            }
            styles.insert(style.clone(), StyleIndex::from_matrix(style, ids, sim));
        }
        Ok(Self { styles })
    }
}

/// Uniform draw from the top `min(k, n − 1)` candidates of `image_id`.
pub fn sample_exemplar<R: Rng + ?Sized>(
    index: &ExemplarIndex,
    image_id: &str,
    k: usize,
    rng: &mut R,
) -> Result<String> {
    if k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    let style = index
        .find(image_id)
        .ok_or_else(|| Error::NotFound(format!("image `{image_id}` is not in the exemplar index")))?;
    let i = style.position(image_id).expect("found above");
    let top = &style.ranked[i][..k.min(style.ranked[i].len())];
    Ok(style.ids[top[rng.random_range(0..top.len())]].clone())
}
