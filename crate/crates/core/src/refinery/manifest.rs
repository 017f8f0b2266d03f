use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    TooSimilar,
    TooDifferent,
    /// Could not be scored.
    Fail,
}

impl Verdict {
    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

/// One manifest line. Generated batches fill `prompt`/`image`; edited
/// batches also carry `pair_of` (the target record) and filter results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub batch: String,
    pub round: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Run-relative image path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// Id of the record whose image is this record's training target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    /// How the image was produced (generator, editor and tuner).
    #[serde(default)]
    pub provenance: String,
}

impl Record {
    pub fn new(id: String, batch: &str, round: &str, seed: u64) -> Self {
        Self {
            id,
            batch: batch.to_string(),
            round: round.to_string(),
            style: None,
            prompt: None,
            image: None,
            sha256: None,
            instruction: None,
            pair_of: None,
            target: None,
            similarity: None,
            verdict: None,
            reason: None,
            error: None,
            seed,
            provenance: String::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.image.is_some() && self.error.is_none()
    }

    /// The `(source, target)` pair this record describes, if any.
    pub fn pair(&self) -> Option<ImagePair> {
        Some(ImagePair {
            id: self.id.clone(),
            source_ref: PathBuf::from(self.image.as_ref()?),
            target_ref: PathBuf::from(self.target.as_ref()?),
            style: self.style.clone().unwrap_or_default(),
            round: self.round.clone(),
            similarity: self.similarity,
            verdict: self.verdict,
            reason: self.reason.clone(),
        })
    }
}

/// An edited image and the original it should map back to. The source is
/// the model input during training; the target is always an original
/// generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub id: String,
    pub source_ref: PathBuf,
    pub target_ref: PathBuf,
    pub style: String,
    pub round: String,
    pub similarity: Option<f64>,
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ImagePair {
    pub fn new(id: &str, source_ref: impl Into<PathBuf>, target_ref: impl Into<PathBuf>, style: &str, round: &str) -> Self {
        Self {
            id: id.to_string(),
            source_ref: source_ref.into(),
            target_ref: target_ref.into(),
            style: style.to_string(),
            round: round.to_string(),
            similarity: None,
            verdict: None,
            reason: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.similarity {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!("similarity {s} of `{}` outside [-1, 1]", self.id)));
            }
        }
        if matches!(self.verdict, Some(v) if v != Verdict::Fail) && self.similarity.is_none() {
            return Err(Error::Validation(format!("`{}` has a verdict but no similarity", self.id)));
        }
        Ok(())
    }

    pub fn usable(&self) -> Option<bool> {
        self.verdict.map(Verdict::is_pass)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchManifest {
    pub label: String,
    pub records: Vec<Record>,
}

impl BatchManifest {
    pub fn new(label: &str, records: Vec<Record>) -> Self {
        Self {
            label: label.to_string(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn failed(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| !r.is_done())
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn pairs(&self) -> Vec<ImagePair> {
        self.records.iter().filter_map(Record::pair).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(label: &str, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?,
            );
        }
        Ok(Self::new(label, records))
    }
}
