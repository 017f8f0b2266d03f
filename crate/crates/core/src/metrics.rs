//! Embedding-based edit metrics and benchmark ingestion.
//!
//! * directional: `cos(E_img(edited) − E_img(input), E_txt(out_cap) − E_txt(in_cap))`
//! * output: `cos(E_img(edited), E_txt(out_cap))`
//! * image: `cos(E_img(input), E_img(edited))`

use std::io::BufRead;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{cosine, BackendProfile, Backends};
use crate::editing::Editor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instruction::BoundInstruction;

/// Published scores of the reference method, shown next to ours as context.
pub const REFERENCE_CLIP_DIR: f64 = 0.1062;
pub const REFERENCE_CLIP_OUT: f64 = 0.2293;
pub const REFERENCE_CLIP_IMG: f64 = 0.7030;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub input_image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_image: Option<PathBuf>,
    pub input_caption: String,
    pub output_caption: String,
    pub instruction: String,
}

fn sub(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Cosine between the image delta and the caption delta; a zero-norm delta
/// scores 0.
pub fn directional_from_embeddings(
    input_img: &[f32],
    edited_img: &[f32],
    input_cap: &[f32],
    output_cap: &[f32],
) -> f64 {
    cosine(&sub(edited_img, input_img), &sub(output_cap, input_cap))
}

pub fn clip_directional(rec: &EvalRecord, input: &Image, edited: &Image, backends: &Backends) -> Result<f64> {
    Ok(directional_from_embeddings(
        &backends.image.embed(input)?,
        &backends.image.embed(edited)?,
        &backends.text.embed(&rec.input_caption)?,
        &backends.text.embed(&rec.output_caption)?,
    ))
}

pub fn clip_image_sim(input: &Image, edited: &Image, backends: &Backends) -> Result<f64> {
    Ok(cosine(&backends.image.embed(input)?, &backends.image.embed(edited)?))
}

pub fn clip_output_sim(edited: &Image, output_caption: &str, backends: &Backends) -> Result<f64> {
    let img = backends.image.embed(edited)?;
    let txt = backends.text.embed(output_caption)?;
    if img.len() != txt.len() {
        return Err(Error::Backend(format!(
            "image embedding ({}) and text embedding ({}) live in different spaces",
            img.len(),
            txt.len()
        )));
    }
    Ok(cosine(&img, &txt))
}

/// A record skipped or rejected while loading, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub records: Vec<EvalRecord>,
    /// Records whose input image is missing or a single flat colour.
    pub blank: Vec<Rejected>,
    /// Records that do not fit the schema.
    pub rejected: Vec<Rejected>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a JSONL sidecar (or `records.jsonl` inside a directory). Image paths
/// are resolved relative to the sidecar's directory.
pub fn load_benchmark(path: &Path) -> Result<Benchmark> {
    let sidecar = if path.is_dir() { path.join("records.jsonl") } else { path.to_path_buf() };
    let base = sidecar.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = std::fs::File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut out = Benchmark::default();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&sidecar, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = n + 1;
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.rejected.push(Rejected { line: lineno, id: None, reason: format!("invalid JSON: {e}") });
                continue;
            }
        };
        let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
        let missing: Vec<&str> = ["input_caption", "output_caption", "instruction", "input_image"]
            .into_iter()
            .filter(|k| value.get(*k).is_none_or(|v| v.is_null()))
            .collect();
        if !missing.is_empty() && missing != ["input_image"] {
            out.rejected.push(Rejected {
                line: lineno,
                id,
                reason: format!("missing field(s): {}", missing.join(", ")),
            });
            continue;
        }
        let input_ref = value.get("input_image").and_then(|v| v.as_str()).unwrap_or("");
        if input_ref.trim().is_empty() {
            out.blank.push(Rejected { line: lineno, id, reason: "no input image".into() });
            continue;
        }
        let mut rec: EvalRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(Rejected { line: lineno, id, reason: e.to_string() });
                continue;
            }
        };
        rec.input_image = resolve(&base, &rec.input_image);
        rec.output_image = rec.output_image.map(|p| resolve(&base, &p));
        match Image::load(&rec.input_image) {
            Ok(img) if img.is_constant() => {
                out.blank.push(Rejected { line: lineno, id: Some(rec.id), reason: "blank input image".into() });
            }
            Ok(_) => out.records.push(rec),
            Err(e) => out.rejected.push(Rejected { line: lineno, id: Some(rec.id), reason: e.to_string() }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub clip_dir: f64,
    pub clip_out: f64,
    pub clip_img: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub means: Scores,
    pub reference: Scores,
    pub backend: BackendProfile,
    pub records: Vec<RecordScores>,
}

/// Order-independent mean: values are summed in sorted order.
pub fn stable_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn score_edit(rec: &EvalRecord, input: &Image, edited: &Image, backends: &Backends) -> Result<Scores> {
    Ok(Scores {
        clip_dir: clip_directional(rec, input, edited, backends)?,
        clip_out: clip_output_sim(edited, &rec.output_caption, backends)?,
        clip_img: clip_image_sim(input, edited, backends)?,
    })
}

/// Edits every record with `editor` and scores the results.
pub fn evaluate_run(records: &[EvalRecord], editor: &dyn Editor, backends: &Backends, seed: u64) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Input("no evaluation records".into()));
    }
    let per = records
        .par_iter()
        .map(|rec| {
            let input = Image::load(&rec.input_image)?;
            let instruction = BoundInstruction::plain(&rec.instruction)?;
            let edited = editor.edit(&input, &instruction, seed)?;
            Ok(RecordScores {
                id: rec.id.clone(),
                scores: score_edit(rec, &input, &edited, backends)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per, backends.text.profile().clone()))
}

pub fn summarize(records: Vec<RecordScores>, backend: BackendProfile) -> EvalReport {
    let col = |f: fn(&Scores) -> f64| stable_mean(&records.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
    EvalReport {
        count: records.len(),
        means: Scores {
            clip_dir: col(|s| s.clip_dir),
            clip_out: col(|s| s.clip_out),
            clip_img: col(|s| s.clip_img),
        },
        reference: Scores {
            clip_dir: REFERENCE_CLIP_DIR,
            clip_out: REFERENCE_CLIP_OUT,
            clip_img: REFERENCE_CLIP_IMG,
        },
        backend,
        records,
    }
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "records: {}  backend: {}\n{:<10} {:>10} {:>10}\n",
            self.count, self.backend.name, "metric", "this run", "reference"
        );
        for (name, ours, reference) in [
            ("CLIP_dir", self.means.clip_dir, self.reference.clip_dir),
            ("CLIP_out", self.means.clip_out, self.reference.clip_out),
            ("CLIP_img", self.means.clip_img, self.reference.clip_img),
        ] {
            s.push_str(&format!("{name:<10} {ours:>10.4} {reference:>10.4}\n"));
        }
        s.push_str("(reference values come from pretrained encoders and are not comparable to toy backends)\n");
        s
    }
}
