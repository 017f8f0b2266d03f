use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_PLACEHOLDER: &str = "{prompt}";

pub const STYLES_TSV: &str = include_str!("../../fixtures/styles.tsv");
pub const STYLE_PROMPTS: &str = include_str!("../../fixtures/prompts_style.txt");
pub const PLAIN_CAPTIONS: &str = include_str!("../../fixtures/captions_plain.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Style,
    Destyle,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Style => "style",
            Direction::Destyle => "destyle",
        })
    }
}

/// A trained per-style LoRA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerRef {
    pub style: String,
    pub direction: Direction,
    pub round: usize,
    pub rank: usize,
    pub checkpoint: PathBuf,
}

impl TunerRef {
    pub fn key(&self) -> String {
        tuner_key(self.direction, self.round)
    }
}

pub fn tuner_key(direction: Direction, round: usize) -> String {
    format!("{direction}-{round}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub expansion_format: String,
    #[serde(default)]
    pub tuner_refs: BTreeMap<String, TunerRef>,
}

impl StyleSpec {
    pub fn new(name: &str, expansion_format: &str) -> Result<Self> {
        let s = Self {
            name: name.to_string(),
            expansion_format: expansion_format.to_string(),
            tuner_refs: BTreeMap::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Validation("style name is empty".into()));
        }
        let n = self.expansion_format.matches(PROMPT_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Validation(format!(
                "format for `{}` must contain {PROMPT_PLACEHOLDER} exactly once, found {n}",
                self.name
            )));
        }
        Ok(())
    }

    pub fn tuner(&self, direction: Direction, round: usize) -> Option<&TunerRef> {
        self.tuner_refs.get(&tuner_key(direction, round))
    }
}

/// Substitutes the prompt; the rest of the format is kept byte for byte.
pub fn expand_prompt(style: &StyleSpec, prompt: &str) -> Result<String> {
    style.validate()?;
    Ok(style.expansion_format.replacen(PROMPT_PLACEHOLDER, prompt, 1))
}

/// `name<TAB>format` per line; blank lines and `#` comments skipped.
pub fn parse_styles(text: &str) -> Result<Vec<StyleSpec>> {
    let mut out: Vec<StyleSpec> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, fmt) = line
            .split_once('\t')
            .ok_or_else(|| Error::Validation(format!("styles line {}: expected name<TAB>format", n + 1)))?;
        let spec = StyleSpec::new(name.trim(), fmt)
            .map_err(|e| Error::Validation(format!("styles line {}: {e}", n + 1)))?;
        if out.iter().any(|s| s.name == spec.name) {
            return Err(Error::Validation(format!("styles line {}: duplicate style `{}`", n + 1, spec.name)));
        }
        out.push(spec);
    }
    Ok(out)
}

pub fn load_styles(path: &Path) -> Result<Vec<StyleSpec>> {
    parse_styles(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// One entry per non-blank line.
pub fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn load_lines(path: &Path) -> Result<Vec<String>> {
    Ok(parse_lines(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?))
}
