//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime.

use std::ffi::OsString;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backends::{BackendConfig, BackendKind, Backends};
use crate::editing::{
    finetune, train_tuner, EditingModel, FinetuneMode, GuidanceConfig, LoraConfig, ModelConfig, ModelEditor,
    TrainReport, TrainSchedule, TrainingExample,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::instruction::{bind, parse_template, ExemplarRef, ScaleWeights};
use crate::metrics::{evaluate_run, load_benchmark};
use crate::refinery::{
    self, load_lines, load_styles, parse_styles, EmbeddingScorer, FilterThresholds, ModelRoundEditor, Pipeline,
    PipelineConfig, PipelineContext, TunerSchedule, STYLES_TSV,
};
use crate::service::{self, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser, Serialize)]
#[command(name = "stylebooth", version, about = "Multimodal-instruction style editing toolkit")]
pub struct Cli {
    /// Root seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Backend kind; overrides the config file and STYLEBOOTH_BACKEND.
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// TOML backend configuration.
    #[arg(long, global = true)]
    pub backend_config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Dataset refinement pipeline.
    Pipeline {
        #[command(subcommand)]
        action: PipelineCmd,
    },
    /// Fine-tune the editing model or train a style tuner.
    Train {
        #[command(subcommand)]
        mode: TrainCmd,
    },
    /// Edit one image.
    Edit(EditArgs),
    /// Score an editor on a benchmark.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand, Serialize)]
pub enum PipelineCmd {
    Run(PipelineRunArgs),
    Resume {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Print the usability table of a run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Only the styles with the largest gains.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineRunArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Styles table (`name<TAB>format`); defaults to the shipped fixture.
    #[arg(long)]
    pub styles: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub max_styles: Option<usize>,
    #[arg(long)]
    pub max_prompts: Option<usize>,
    #[arg(long)]
    pub max_captions: Option<usize>,
    #[arg(long, default_value_t = refinery::DEFAULT_DESTYLE_PHASES)]
    pub destyle_phases: usize,
    #[arg(long)]
    pub lower: Option<f64>,
    #[arg(long)]
    pub upper: Option<f64>,
    #[arg(long)]
    pub tuner_steps: Option<usize>,
    #[arg(long)]
    pub tuner_resolution: Option<usize>,
    #[arg(long)]
    pub tuner_lr: Option<f64>,
    #[arg(long)]
    pub tuner_rank: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Denoiser checkpoint; a freshly initialised model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Sampling steps.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = GuidanceConfig::default().image_scale)]
    pub s_image: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().text_scale)]
    pub s_text: f64,
}

impl ModelArgs {
    fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            image_scale: self.s_image,
            text_scale: self.s_text,
            ..GuidanceConfig::default()
        }
    }
}

#[derive(Debug, Subcommand, Serialize)]
pub enum TrainCmd {
    Text(TrainArgs),
    Exemplar(TrainArgs),
    Tuner(TunerArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSONL records with `source`, `target`, `instruction` and optional
    /// `styles`, `exemplars`, `alphas`; paths relative to the file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TunerArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 256)]
    pub rank: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub instruction: String,
    /// Binds `<style>` slots in order.
    #[arg(long = "style")]
    pub styles: Vec<String>,
    /// Binds `<image>` slots in order.
    #[arg(long = "exemplar")]
    pub exemplars: Vec<PathBuf>,
    /// Per-slot scale weights in slot order.
    #[arg(long = "alpha")]
    pub alphas: Vec<f32>,
    /// LoRA tuner to apply.
    #[arg(long)]
    pub tuner: Option<PathBuf>,
    #[arg(long, default_value = "edited.png")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Benchmark JSONL or a directory holding `records.jsonl`.
    #[arg(long)]
    pub records: PathBuf,
    /// Write the full report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// TOML service configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub styles: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

/// Everything needed to rebuild a pipeline run's runtime context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub backend: BackendConfig,
    pub model: Option<PathBuf>,
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

const RUN_CONFIG_FILE: &str = "run_config.json";

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn backend_config(cli: &Cli) -> Result<BackendConfig> {
    let base = match &cli.backend_config {
        Some(p) => BackendConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BackendConfig::default(),
    };
    let mut cfg = base.with_env()?;
    if let Some(k) = cli.backend {
        cfg.kind = k;
    }
    Ok(cfg)
}

fn load_model(path: Option<&Path>, backends: Backends, seed: u64) -> Result<EditingModel> {
    match path {
        Some(p) => EditingModel::load(p, backends),
        None => EditingModel::new(ModelConfig::for_backends(&backends, seed), backends),
    }
}

fn write_echo(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Echo file written next to an output: `out.png` → `out.png.run.json`.
fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pipeline { action } => match action {
            PipelineCmd::Run(a) => pipeline_run(cli, a),
            PipelineCmd::Resume { run_dir } => pipeline_resume(run_dir),
            PipelineCmd::Report { run_dir, top, json } => {
                let table = refinery::report(run_dir)?;
                if *json {
                    println!("{}", serde_json::to_string_pretty(&table)?);
                } else {
                    print!("{}", table.to_table(*top));
                }
                Ok(())
            }
        },
        Command::Train { mode } => train(cli, mode),
        Command::Edit(a) => edit(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Serve(a) => serve(cli, a),
    }
}

fn take<T>(mut v: Vec<T>, n: Option<usize>) -> Vec<T> {
    if let Some(n) = n {
        v.truncate(n);
    }
    v
}

fn pipeline_context(rc: &RunConfig) -> Result<PipelineContext> {
    let backends = Backends::from_config(&rc.backend)?;
    let model = load_model(rc.model.as_deref(), backends.clone(), rc.seed)?;
    Ok(PipelineContext {
        t2i: backends.t2i.clone(),
        editor: Arc::new(ModelRoundEditor::new(Arc::new(model), rc.guidance.clone(), rc.steps)),
        scorer: Arc::new(EmbeddingScorer::new(backends.image.clone())),
        encoder: backends.image.clone(),
    })
}

fn pipeline_run(cli: &Cli, a: &PipelineRunArgs) -> Result<()> {
    let backend = backend_config(cli)?;
    let styles = match &a.styles {
        Some(p) => load_styles(p)?,
        None => parse_styles(STYLES_TSV)?,
    };
    let fixtures = PipelineConfig::from_fixtures()?;
    let prompts = match &a.prompts {
        Some(p) => load_lines(p)?,
        None => fixtures.prompts,
    };
    let captions = match &a.captions {
        Some(p) => load_lines(p)?,
        None => fixtures.captions,
    };
    let mut cfg = PipelineConfig::new(
        take(styles, a.max_styles),
        take(prompts, a.max_prompts),
        take(captions, a.max_captions),
    );
    cfg.seed = cli.seed;
    cfg.destyle_phases = a.destyle_phases;
    let defaults = FilterThresholds::default();
    cfg.thresholds = FilterThresholds::new(a.lower.unwrap_or(defaults.lower), a.upper.unwrap_or(defaults.upper))?;
    // Toy images are tiny; full-scale tuner settings would only upsample them.
    let mut tuner = match backend.kind {
        BackendKind::Toy => TunerSchedule::toy(50, backend.toy.image_size),
        BackendKind::Real => TunerSchedule::default(),
    };
    if let Some(s) = a.tuner_steps {
        tuner.steps = s;
    }
    if let Some(r) = a.tuner_resolution {
        tuner.resolution = r;
    }
    if let Some(lr) = a.tuner_lr {
        tuner.learning_rate = lr;
    }
    if let Some(r) = a.tuner_rank {
        tuner.rank = r;
        tuner.alpha = r as f64;
    }
    cfg.tuner = tuner;

    let rc = RunConfig {
        command: "pipeline run".into(),
        seed: cli.seed,
        backend,
        model: a.model.model.clone(),
        steps: a.model.steps,
        guidance: a.model.guidance(),
    };
    std::fs::create_dir_all(&a.run_dir).map_err(|e| Error::io(&a.run_dir, e))?;
    let echo = a.run_dir.join(RUN_CONFIG_FILE);
    if echo.exists() {
        let previous: RunConfig = serde_json::from_slice(&std::fs::read(&echo).map_err(|e| Error::io(&echo, e))?)?;
        if previous != rc {
            return Err(Error::Config(format!(
                "{} was started with different runtime settings; use `pipeline resume`",
                a.run_dir.display()
            )));
        }
    }
    let mut pipeline = Pipeline::create(&a.run_dir, cfg, pipeline_context(&rc)?)?;
    write_echo(&echo, &rc)?;
    finish_pipeline(&mut pipeline)
}

fn pipeline_resume(run_dir: &Path) -> Result<()> {
    let echo = run_dir.join(RUN_CONFIG_FILE);
    let rc: RunConfig = serde_json::from_slice(&std::fs::read(&echo).map_err(|e| Error::io(&echo, e))?)?;
    let mut pipeline = Pipeline::open(run_dir, pipeline_context(&rc)?)?;
    finish_pipeline(&mut pipeline)
}

fn finish_pipeline(p: &mut Pipeline) -> Result<()> {
    let out = p.run()?;
    if out.ran.is_empty() {
        println!("run already complete; nothing to do");
    } else {
        println!("ran: {}", out.ran.join(", "));
    }
    println!("final pairs: {} ({})", out.final_pairs, out.final_manifest.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TrainLine {
    #[serde(alias = "image")]
    source: PathBuf,
    target: PathBuf,
    instruction: String,
    #[serde(default)]
    styles: Vec<String>,
    #[serde(default)]
    exemplars: Vec<PathBuf>,
    #[serde(default)]
    alphas: Vec<f32>,
}

/// Reads training records; relative paths resolve against the file's
/// directory.
pub fn load_training_jsonl(path: &Path) -> Result<Vec<TrainingExample>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainLine = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let exemplars = rec
            .exemplars
            .iter()
            .enumerate()
            .map(|(i, p)| ExemplarRef::from_path(format!("ex{i}"), base.join(p)))
            .collect();
        let instruction = bind(parse_template(&rec.instruction)?, rec.styles, exemplars, ScaleWeights::new(rec.alphas)?)?;
        out.push(TrainingExample {
            source: Image::load(&base.join(&rec.source))?,
            target: Image::load(&base.join(&rec.target))?,
            instruction,
        });
    }
    Ok(out)
}

fn schedule_for(a: &TrainArgs, base: TrainSchedule, seed: u64) -> TrainSchedule {
    let mut s = base;
    if let Some(n) = a.steps {
        s.steps = n;
    }
    if let Some(lr) = a.lr {
        s.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        s.batch_size = b;
    }
    s.seed = seed;
    s
}

fn print_report(report: &TrainReport) {
    println!(
        "steps {}  lr {}  eval loss {:.6} -> {:.6}",
        report.steps, report.learning_rate, report.initial_eval_loss, report.final_eval_loss
    );
}

fn train(cli: &Cli, mode: &TrainCmd) -> Result<()> {
    let backends = Backends::from_config(&backend_config(cli)?)?;
    let (args, kind) = match mode {
        TrainCmd::Text(a) => (a, Some(FinetuneMode::TextBased)),
        TrainCmd::Exemplar(a) => (a, Some(FinetuneMode::ExemplarBased)),
        TrainCmd::Tuner(t) => (&t.train, None),
    };
    let data = load_training_jsonl(&args.data)?;
    let mut model = load_model(args.init.as_deref(), backends, cli.seed)?;
    let report = match (kind, mode) {
        (Some(m), _) => {
            let schedule = schedule_for(args, TrainSchedule::for_mode(m), cli.seed);
            let report = finetune(&mut model, m, &data, &schedule)?;
            model.save(&args.out, serde_json::json!({ "train": report_meta(&report, &schedule) }))?;
            report
        }
        (None, TrainCmd::Tuner(t)) => {
            let schedule = schedule_for(args, TrainSchedule::text_based(), cli.seed);
            let lora = LoraConfig {
                rank: t.rank,
                alpha: t.rank as f64,
            };
            let (set, report) = train_tuner(&model, &data, lora, &schedule)?;
            model.save_tuner(&set, &args.out, serde_json::json!({ "train": report_meta(&report, &schedule) }))?;
            report
        }
        _ => unreachable!("tuner mode has no finetune kind"),
    };
    write_echo(&echo_path(&args.out), &cli)?;
    print_report(&report);
    println!("{}", args.out.display());
    Ok(())
}

fn report_meta(report: &TrainReport, schedule: &TrainSchedule) -> serde_json::Value {
    serde_json::json!({
        "schedule": schedule,
        "initial_eval_loss": report.initial_eval_loss,
        "final_eval_loss": report.final_eval_loss,
    })
}

fn edit(cli: &Cli, a: &EditArgs) -> Result<()> {
    let backends = Backends::from_config(&backend_config(cli)?)?;
    let mut model = load_model(a.model.model.as_deref(), backends, cli.seed)?;
    if let Some(t) = &a.tuner {
        let set = model.load_tuner(t)?;
        model.set_tuner(Some(set));
    }
    let exemplars = a
        .exemplars
        .iter()
        .enumerate()
        .map(|(i, p)| ExemplarRef::from_path(format!("ex{i}"), p.clone()))
        .collect();
    let bound = bind(
        parse_template(&a.instruction)?,
        a.styles.clone(),
        exemplars,
        ScaleWeights::new(a.alphas.clone())?,
    )?;
    let image = Image::load(&a.image)?;
    let out = model.sample_edit(&image, &bound, &a.model.guidance(), a.model.steps, cli.seed)?;
    out.save_png(&a.out)?;
    write_echo(&echo_path(&a.out), &cli)?;
    println!("{}", a.out.display());
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let bench = load_benchmark(&a.records)?;
    for r in bench.blank.iter().chain(&bench.rejected) {
        eprintln!("skipped line {} ({}): {}", r.line, r.id.as_deref().unwrap_or("?"), r.reason);
    }
    if bench.records.is_empty() {
        return Err(Error::Input(format!("{} holds no usable records", a.records.display())));
    }
    let backends = Backends::from_config(&backend_config(cli)?)?;
    let model = load_model(a.model.model.as_deref(), backends.clone(), cli.seed)?;
    let editor = ModelEditor::new(Arc::new(model), a.model.guidance(), a.model.steps);
    let report = evaluate_run(&bench.records, &editor, &backends, cli.seed)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_echo(out, &report)?;
        write_echo(&echo_path(out), &cli)?;
    }
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => ServiceConfig::default(),
    }
    .with_env();
    if let Some(b) = &a.bind {
        cfg.bind = b.clone();
    }
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    let styles = match &a.styles {
        Some(p) => load_styles(p)?,
        None => parse_styles(STYLES_TSV)?,
    };
    let backends = Backends::from_config(&backend_config(cli)?)?;
    let model = load_model(a.model.model.as_deref(), backends, cli.seed)?;
    let editor = Arc::new(ModelEditor::new(Arc::new(model), a.model.guidance(), a.model.steps));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Backend(format!("tokio runtime: {e}")))?;
    rt.block_on(service::serve(cfg, editor, styles))
}

pub fn init_tracing() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
}
