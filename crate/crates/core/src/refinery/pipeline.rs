//! Resumable run of the style/de-style refinement loop.
//!
//! All artifacts live under one run directory:
//!
//! ```text
//! config.json  state.json  log.jsonl  exemplar_index.jsonl
//! manifests/{A,B,A1,B1,A2,...,final}.jsonl
//! images/{label}/{id}.png
//! tuners/{style|destyle}-{round}/{style}.safetensors
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filter::{filter_pairs, FilterThresholds, PairScorer};
use super::manifest::{BatchManifest, ImagePair, Record};
use super::styles::{expand_prompt, parse_lines, parse_styles, Direction, StyleSpec, TunerRef, PLAIN_CAPTIONS, STYLES_TSV, STYLE_PROMPTS};
use super::tuning::{train_tuner, RoundEditor, TunerSchedule};
use super::usability::{usability_rate, UsabilityComparison};
use crate::backends::toy::derive_seed;
use crate::backends::{ImageEncoder, T2IClient};
use crate::error::{Error, Result};
use crate::exemplar::ExemplarIndex;
use crate::image::{file_hash, Image};
use crate::instruction::{bind, parse_template, BoundInstruction, ScaleWeights};

pub const DEFAULT_DESTYLE_PHASES: usize = 2;
pub const STYLE_INSTRUCTION: &str = "Let this image be in the style of <style>";
pub const DESTYLE_INSTRUCTION: &str = "Remove the art style and turn it into a plain photo";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub styles: Vec<StyleSpec>,
    pub prompts: Vec<String>,
    pub captions: Vec<String>,
    pub thresholds: FilterThresholds,
    /// Number of de-style passes over the stylized batch, the vanilla one
    /// included.
    pub destyle_phases: usize,
    pub seed: u64,
    pub tuner: TunerSchedule,
    pub style_instruction: String,
    pub destyle_instruction: String,
}

impl PipelineConfig {
    pub fn new(styles: Vec<StyleSpec>, prompts: Vec<String>, captions: Vec<String>) -> Self {
        Self {
            styles,
            prompts,
            captions,
            thresholds: FilterThresholds::default(),
            destyle_phases: DEFAULT_DESTYLE_PHASES,
            seed: 0,
            tuner: TunerSchedule::default(),
            style_instruction: STYLE_INSTRUCTION.into(),
            destyle_instruction: DESTYLE_INSTRUCTION.into(),
        }
    }

    /// Styles, prompts and captions shipped with the crate.
    pub fn from_fixtures() -> Result<Self> {
        Ok(Self::new(parse_styles(STYLES_TSV)?, parse_lines(STYLE_PROMPTS), parse_lines(PLAIN_CAPTIONS)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.is_empty() || self.prompts.is_empty() || self.captions.is_empty() {
            return Err(Error::Config("pipeline needs styles, prompts and captions".into()));
        }
        for s in &self.styles {
            s.validate()?;
        }
        if self.destyle_phases == 0 {
            return Err(Error::Config("at least one de-style phase is required".into()));
        }
        self.thresholds.validate()?;
        self.tuner.validate()?;
        self.style_bound("x")?;
        self.destyle_bound()?;
        Ok(())
    }

    pub fn style_bound(&self, style: &str) -> Result<BoundInstruction> {
        bind(
            parse_template(&self.style_instruction)?,
            vec![style.to_string()],
            vec![],
            ScaleWeights::default(),
        )
    }

    pub fn destyle_bound(&self) -> Result<BoundInstruction> {
        BoundInstruction::plain(&self.destyle_instruction)
    }

    /// Stage sequence for this config.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = vec![Stage::GenerateA, Stage::GenerateB, Stage::Destyle(1), Stage::Filter(batch_a(1))];
        for k in 1..self.destyle_phases {
            s.extend([
                Stage::TuneStyle(k),
                Stage::Stylize(k),
                Stage::Filter(batch_b(k)),
                Stage::TuneDestyle(k),
                Stage::Destyle(k + 1),
                Stage::Filter(batch_a(k + 1)),
            ]);
        }
        s.push(Stage::Finalize);
        s
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(crate::image::content_hash(&serde_json::to_vec(self)?))
    }
}

fn batch_a(k: usize) -> String {
    format!("A{k}")
}

fn batch_b(k: usize) -> String {
    format!("B{k}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    GenerateA,
    GenerateB,
    /// Produces `A{k}`: vanilla editor for k = 1, de-style tuner `k − 1` after.
    Destyle(usize),
    Filter(String),
    /// Style tuners on `A{k}` → A pairs.
    TuneStyle(usize),
    /// Produces `B{k}` with style tuner `k`.
    Stylize(usize),
    /// De-style tuners on `B{k}` → B pairs.
    TuneDestyle(usize),
    Finalize,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::GenerateA => "generate_a".into(),
            Stage::GenerateB => "generate_b".into(),
            Stage::Destyle(k) => format!("destyle_a{k}"),
            Stage::Filter(b) => format!("filter_{}", b.to_lowercase()),
            Stage::TuneStyle(k) => format!("tune_style_{k}"),
            Stage::Stylize(k) => format!("stylize_b{k}"),
            Stage::TuneDestyle(k) => format!("tune_destyle_{k}"),
            Stage::Finalize => "finalize".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub fingerprint: String,
    pub completed: Vec<String>,
    pub tuners: Vec<TunerRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub event: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
    pub unix_ms: u128,
}

/// Runtime collaborators; none of them is persisted.
#[derive(Clone)]
pub struct PipelineContext {
    pub t2i: Arc<dyn T2IClient>,
    pub editor: Arc<dyn RoundEditor>,
    pub scorer: Arc<dyn PairScorer>,
    pub encoder: Arc<dyn ImageEncoder>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    /// Stages executed by this call, in order.
    pub ran: Vec<String>,
    pub final_manifest: PathBuf,
    pub final_pairs: usize,
}

pub struct Pipeline {
    dir: PathBuf,
    config: PipelineConfig,
    ctx: PipelineContext,
    state: RunState,
}

const CONFIG_FILE: &str = "config.json";
const STATE_FILE: &str = "state.json";
const LOG_FILE: &str = "log.jsonl";
pub const INDEX_FILE: &str = "exemplar_index.jsonl";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn manifest_path(dir: &Path, label: &str) -> PathBuf {
    dir.join("manifests").join(format!("{label}.jsonl"))
}

pub fn read_log(dir: &Path) -> Result<Vec<LogEntry>> {
    let path = dir.join(LOG_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_config(dir: &Path) -> Result<PipelineConfig> {
    read_json(&dir.join(CONFIG_FILE))
}

impl Pipeline {
    /// Starts a run in `dir`, or reattaches if `dir` holds the same config.
    pub fn create(dir: &Path, config: PipelineConfig, ctx: PipelineContext) -> Result<Self> {
        config.validate()?;
        let fingerprint = config.fingerprint()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state_path = dir.join(STATE_FILE);
        let state = if state_path.exists() {
            let state: RunState = read_json(&state_path)?;
            if state.fingerprint != fingerprint {
                return Err(Error::Config(format!(
                    "{} already holds a run with a different config",
                    dir.display()
                )));
            }
            state
        } else {
            write_json(&dir.join(CONFIG_FILE), &config)?;
            let state = RunState {
                fingerprint,
                ..RunState::default()
            };
            write_json(&state_path, &state)?;
            state
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            ctx,
            state,
        })
    }

    /// Reattaches to an existing run using its stored config.
    pub fn open(dir: &Path, ctx: PipelineContext) -> Result<Self> {
        let state_path = dir.join(STATE_FILE);
        if !state_path.exists() {
            return Err(Error::NotFound(format!("no pipeline run in {}", dir.display())));
        }
        let config = read_config(dir)?;
        Self::create(dir, config, ctx)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_complete(&self) -> bool {
        self.config.stages().iter().all(|s| self.state.completed.contains(&s.name()))
    }

    fn final_label(&self) -> String {
        "final".into()
    }

    /// Runs every stage not yet completed. A finished run is left untouched.
    pub fn run(&mut self) -> Result<PipelineOutcome> {
        let mut ran = Vec::new();
        for stage in self.config.stages() {
            let name = stage.name();
            if self.state.completed.contains(&name) {
                continue;
            }
            self.log(&name, "start", serde_json::Value::Null)?;
            match self.execute(&stage) {
                Ok(detail) => {
                    self.state.completed.push(name.clone());
                    self.save_state()?;
                    self.log(&name, "done", detail)?;
                    ran.push(name);
                }
                Err(e) => {
                    self.save_state()?;
                    self.log(&name, "fail", serde_json::json!({ "error": e.to_string() }))?;
                    return Err(e);
                }
            }
        }
        let final_manifest = manifest_path(&self.dir, &self.final_label());
        let final_pairs = BatchManifest::read("final", &final_manifest)?.len();
        Ok(PipelineOutcome {
            ran,
            final_manifest,
            final_pairs,
        })
    }

    fn save_state(&self) -> Result<()> {
        write_json(&self.dir.join(STATE_FILE), &self.state)
    }

    fn log(&self, stage: &str, event: &str, detail: serde_json::Value) -> Result<()> {
        let entry = LogEntry {
            stage: stage.to_string(),
            event: event.to_string(),
            detail,
            unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        };
        let path = self.dir.join(LOG_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&path, e))
    }

    fn execute(&mut self, stage: &Stage) -> Result<serde_json::Value> {
        match stage {
            Stage::GenerateA => self.generate_a(),
            Stage::GenerateB => self.generate_b(),
            Stage::Destyle(k) => self.destyle(*k),
            Stage::Filter(label) => self.filter(label),
            Stage::TuneStyle(k) => self.tune(Direction::Style, *k),
            Stage::Stylize(k) => self.stylize(*k),
            Stage::TuneDestyle(k) => self.tune(Direction::Destyle, *k),
            Stage::Finalize => self.finalize(),
        }
    }

    fn seed(&self, domain: &str, id: &str) -> u64 {
        derive_seed(self.config.seed, domain, id.as_bytes())
    }

    fn read(&self, label: &str) -> Result<BatchManifest> {
        BatchManifest::read(label, &manifest_path(&self.dir, label))
    }

    fn image_path(label: &str, id: &str) -> String {
        format!("images/{label}/{id}.png")
    }

    /// Produces the image of every planned record. Records already on disk
    /// with a matching hash are kept, so a resumed stage only redoes
    /// failures.
    fn fill_batch<F>(&self, stage: &str, label: &str, planned: Vec<Record>, produce: F) -> Result<serde_json::Value>
    where
        F: Fn(&Record) -> Result<Image> + Sync,
    {
        let path = manifest_path(&self.dir, label);
        let previous: HashMap<String, Record> = if path.exists() {
            BatchManifest::read(label, &path)?
                .records
                .into_iter()
                .map(|r| (r.id.clone(), r))
                .collect()
        } else {
            HashMap::new()
        };
        let dir = &self.dir;
        let records: Vec<(Record, bool)> = planned
            .into_par_iter()
            .map(|mut rec| {
                if let Some(old) = previous.get(&rec.id) {
                    let intact = old.is_done()
                        && old.image.as_ref().is_some_and(|p| {
                            file_hash(&dir.join(p)).ok().as_deref() == old.sha256.as_deref()
                        });
                    if intact {
                        return (old.clone(), false);
                    }
                }
                let rel = Self::image_path(label, &rec.id);
                match produce(&rec).and_then(|img| img.save_png(&dir.join(&rel))) {
                    Ok(hash) => {
                        rec.image = Some(rel);
                        rec.sha256 = Some(hash);
                        rec.error = None;
                    }
                    Err(e) => {
                        rec.image = None;
                        rec.sha256 = None;
                        rec.error = Some(e.to_string());
                    }
                }
                (rec, true)
            })
            .collect();
        let produced = records.iter().filter(|(_, fresh)| *fresh).count();
        let manifest = BatchManifest::new(label, records.into_iter().map(|(r, _)| r).collect());
        manifest.write(&path)?;
        let failed = manifest.failed().count();
        if failed > 0 {
            return Err(Error::StageIncomplete {
                stage: stage.to_string(),
                reason: format!("{failed} of {} records in {label} failed; resume to retry them", manifest.len()),
            });
        }
        Ok(serde_json::json!({ "batch": label, "records": manifest.len(), "produced": produced }))
    }

    fn generate_a(&mut self) -> Result<serde_json::Value> {
        let mut planned = Vec::new();
        for (si, style) in self.config.styles.iter().enumerate() {
            for (pi, prompt) in self.config.prompts.iter().enumerate() {
                let id = format!("a_s{si:02}_p{pi:04}");
                let mut r = Record::new(id.clone(), "A", "A", self.seed("A", &id));
                r.style = Some(style.name.clone());
                r.prompt = Some(expand_prompt(style, prompt)?);
                r.provenance = "t2i".into();
                planned.push(r);
            }
        }
        let t2i = self.ctx.t2i.clone();
        self.fill_batch("generate_a", "A", planned, |r| {
            t2i.generate(r.prompt.as_deref().unwrap_or_default(), r.seed)
        })
    }

    fn generate_b(&mut self) -> Result<serde_json::Value> {
        let planned = self
            .config
            .captions
            .iter()
            .enumerate()
            .map(|(ci, caption)| {
                let id = format!("b_c{ci:04}");
                let mut r = Record::new(id.clone(), "B", "B", self.seed("B", &id));
                r.prompt = Some(caption.clone());
                r.provenance = "t2i".into();
                r
            })
            .collect();
        let t2i = self.ctx.t2i.clone();
        self.fill_batch("generate_b", "B", planned, |r| {
            t2i.generate(r.prompt.as_deref().unwrap_or_default(), r.seed)
        })
    }

    fn tuner(&self, style: &str, direction: Direction, round: usize) -> Option<&TunerRef> {
        self.state
            .tuners
            .iter()
            .find(|t| t.style == style && t.direction == direction && t.round == round && t.checkpoint.exists())
    }

    /// Edits each job's `target` image into batch `label`. The edit input is
    /// also the training target of the resulting pair.
    fn edit_round(
        &self,
        stage: &str,
        label: &str,
        jobs: Vec<(Record, BoundInstruction, Option<TunerRef>)>,
    ) -> Result<serde_json::Value> {
        let lookup: HashMap<String, (BoundInstruction, Option<TunerRef>)> = jobs
            .iter()
            .map(|(r, b, t)| (r.id.clone(), (b.clone(), t.clone())))
            .collect();
        let planned: Vec<Record> = jobs.into_iter().map(|(r, _, _)| r).collect();
        let editor = self.ctx.editor.clone();
        let dir = self.dir.clone();
        self.fill_batch(stage, label, planned, |r| {
            let (instruction, tuner) = &lookup[&r.id];
            let target = r
                .target
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("record `{}` has no input image", r.id)))?;
            let input = Image::load(&dir.join(target))?;
            editor.edit(&input, instruction, tuner.as_ref(), r.seed)
        })
    }

    fn edit_record(&self, src: &Record, label: &str, id: String, style: Option<String>, instruction: &BoundInstruction, tuner: Option<&TunerRef>) -> Record {
        let mut r = Record::new(id.clone(), label, label, self.seed(label, &id));
        r.style = style;
        r.pair_of = Some(src.id.clone());
        r.target = src.image.clone();
        r.instruction = Some(instruction.text());
        r.provenance = match tuner {
            Some(t) => format!("{} + {}-{} tuner", self.ctx.editor.describe(), t.direction, t.round),
            None => self.ctx.editor.describe(),
        };
        r
    }

    fn destyle(&mut self, k: usize) -> Result<serde_json::Value> {
        let a = self.read("A")?;
        let instruction = self.config.destyle_bound()?;
        let label = batch_a(k);
        let mut jobs = Vec::new();
        let mut skipped = Vec::new();
        for style in &self.config.styles {
            let tuner = if k == 1 {
                None
            } else {
                match self.tuner(&style.name, Direction::Destyle, k - 1) {
                    Some(t) => Some(t.clone()),
                    None => {
                        skipped.push(style.name.clone());
                        continue;
                    }
                }
            };
            for src in a.records.iter().filter(|r| r.style.as_deref() == Some(&style.name)) {
                let id = format!("{label}-{}", src.id);
                let rec = self.edit_record(src, &label, id, src.style.clone(), &instruction, tuner.as_ref());
                jobs.push((rec, instruction.clone(), tuner.clone()));
            }
        }
        if !skipped.is_empty() {
            self.log(&Stage::Destyle(k).name(), "skip", serde_json::json!({ "styles": skipped, "reason": "no de-style tuner" }))?;
        }
        let mut detail = self.edit_round(&Stage::Destyle(k).name(), &label, jobs)?;
        detail["skipped_styles"] = serde_json::json!(skipped);
        Ok(detail)
    }

    fn stylize(&mut self, k: usize) -> Result<serde_json::Value> {
        let b = self.read("B")?;
        let label = batch_b(k);
        let mut jobs = Vec::new();
        let mut skipped = Vec::new();
        for (si, style) in self.config.styles.iter().enumerate() {
            let Some(tuner) = self.tuner(&style.name, Direction::Style, k).cloned() else {
                skipped.push(style.name.clone());
                continue;
            };
            let instruction = self.config.style_bound(&style.name)?;
            for src in &b.records {
                let id = format!("{label}-s{si:02}-{}", src.id);
                let rec = self.edit_record(src, &label, id, Some(style.name.clone()), &instruction, Some(&tuner));
                jobs.push((rec, instruction.clone(), Some(tuner.clone())));
            }
        }
        if !skipped.is_empty() {
            self.log(&Stage::Stylize(k).name(), "skip", serde_json::json!({ "styles": skipped, "reason": "no style tuner" }))?;
        }
        let mut detail = self.edit_round(&Stage::Stylize(k).name(), &label, jobs)?;
        detail["skipped_styles"] = serde_json::json!(skipped);
        Ok(detail)
    }

    fn filter(&mut self, label: &str) -> Result<serde_json::Value> {
        let mut m = self.read(label)?;
        let judged = filter_pairs(m.pairs(), &self.config.thresholds, self.ctx.scorer.as_ref(), &self.dir)?;
        let by_id: HashMap<&str, &ImagePair> = judged.iter().map(|p| (p.id.as_str(), p)).collect();
        for r in &mut m.records {
            if let Some(p) = by_id.get(r.id.as_str()) {
                r.similarity = p.similarity;
                r.verdict = p.verdict;
                r.reason = p.reason.clone();
            }
        }
        m.write(&manifest_path(&self.dir, label))?;
        let report = usability_rate(&judged)?;
        Ok(serde_json::json!({
            "batch": label,
            "pairs": judged.len(),
            "passed": judged.iter().filter(|p| p.usable() == Some(true)).count(),
            "average_rate": report.average(),
        }))
    }

    fn tune(&mut self, direction: Direction, k: usize) -> Result<serde_json::Value> {
        let (label, stage) = match direction {
            Direction::Style => (batch_a(k), Stage::TuneStyle(k)),
            Direction::Destyle => (batch_b(k), Stage::TuneDestyle(k)),
        };
        let pairs: Vec<ImagePair> = self
            .read(&label)?
            .pairs()
            .into_iter()
            .filter(|p| p.usable() == Some(true))
            .collect();
        let mut by_style: BTreeMap<&str, Vec<ImagePair>> = BTreeMap::new();
        for p in &pairs {
            by_style.entry(p.style.as_str()).or_default().push(p.clone());
        }
        let mut work = Vec::new();
        let mut skipped = Vec::new();
        let mut reused = Vec::new();
        for (si, style) in self.config.styles.iter().enumerate() {
            if self.tuner(&style.name, direction, k).is_some() {
                reused.push(style.name.clone());
                continue;
            }
            match by_style.remove(style.name.as_str()) {
                Some(ps) => {
                    let instruction = match direction {
                        Direction::Style => self.config.style_bound(&style.name)?,
                        Direction::Destyle => self.config.destyle_bound()?,
                    };
                    let ckpt = self
                        .dir
                        .join("tuners")
                        .join(format!("{direction}-{k}"))
                        .join(format!("s{si:02}.safetensors"));
                    work.push((style.clone(), ps, instruction, ckpt, si));
                }
                None => skipped.push(style.name.clone()),
            }
        }
        if !skipped.is_empty() {
            self.log(&stage.name(), "skip", serde_json::json!({ "styles": skipped, "reason": "no usable pairs" }))?;
        }
        let editor = self.ctx.editor.clone();
        let dir = self.dir.clone();
        let base = self.config.tuner.clone();
        let seed = self.config.seed;
        let results: Vec<(String, Result<(TunerRef, f64, f64)>)> = work
            .into_par_iter()
            .map(|(style, ps, instruction, ckpt, si)| {
                let schedule = TunerSchedule {
                    seed: derive_seed(seed, &format!("tune-{direction}-{k}"), &si.to_le_bytes()),
                    ..base.clone()
                };
                let r = train_tuner(&style, direction, k, &ps, &instruction, &dir, ckpt, &schedule, editor.as_ref())
                    .map(|(t, rep)| (t, rep.initial_eval_loss, rep.final_eval_loss));
                (style.name, r)
            })
            .collect();
        let mut trained = Vec::new();
        let mut failed = Vec::new();
        for (style, r) in results {
            match r {
                Ok((t, before, after)) => {
                    self.state.tuners.push(t);
                    trained.push(serde_json::json!({ "style": style, "eval_loss_before": before, "eval_loss_after": after }));
                }
                Err(e) => failed.push(format!("{style}: {e}")),
            }
        }
        if !failed.is_empty() {
            return Err(Error::StageIncomplete {
                stage: stage.name(),
                reason: failed.join("; "),
            });
        }
        Ok(serde_json::json!({ "trained": trained, "reused": reused, "skipped": skipped }))
    }

    fn finalize(&mut self) -> Result<serde_json::Value> {
        let last = batch_a(self.config.destyle_phases);
        let a = self.read("A")?;
        let an = self.read(&last)?;
        let mut records = Vec::new();
        let mut per_style: BTreeMap<String, Vec<(String, Vec<f32>)>> = BTreeMap::new();
        for r in an.records.iter().filter(|r| r.verdict.is_some_and(|v| v.is_pass())) {
            let target = r
                .pair_of
                .as_deref()
                .and_then(|id| a.get(id))
                .ok_or_else(|| Error::Dataset(format!("`{}` does not point into batch A", r.id)))?;
            let style = target.style.clone().unwrap_or_default();
            let mut f = r.clone();
            f.id = format!("final-{}", target.id);
            f.batch = "final".into();
            f.target = target.image.clone();
            f.pair_of = Some(target.id.clone());
            f.instruction = Some(self.config.style_bound(&style)?.text());
            records.push(f);
            let img = Image::load(&self.dir.join(target.image.as_deref().unwrap_or_default()))?;
            per_style
                .entry(style)
                .or_default()
                .push((target.id.clone(), self.ctx.encoder.embed(&img)?));
        }
        let final_manifest = BatchManifest::new("final", records);
        final_manifest.write(&manifest_path(&self.dir, "final"))?;
        let small: Vec<String> = per_style
            .iter()
            .filter(|(_, v)| v.len() < 2)
            .map(|(k, _)| k.clone())
            .collect();
        per_style.retain(|_, v| v.len() >= 2);
        let index = ExemplarIndex::build(&per_style)?;
        index.write_jsonl(&self.dir.join(INDEX_FILE))?;
        Ok(serde_json::json!({
            "source_batch": last,
            "pairs": final_manifest.len(),
            "indexed_styles": per_style.len(),
            "styles_too_small_for_index": small,
        }))
    }
}

/// Usability of the vanilla de-style batch against the last de-style batch.
pub fn report(dir: &Path) -> Result<UsabilityComparison> {
    let config = read_config(dir)?;
    let first = batch_a(1);
    let last = batch_a(config.destyle_phases);
    let rate = |label: &str| -> Result<_> {
        let m = BatchManifest::read(label, &manifest_path(dir, label))?;
        usability_rate(&m.pairs())
    };
    let formats = config
        .styles
        .iter()
        .map(|s| (s.name.clone(), s.expansion_format.clone()))
        .collect();
    Ok(UsabilityComparison::new(&first, &rate(&first)?, &last, &rate(&last)?, &formats))
}
