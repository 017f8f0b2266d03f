//! Paired-dataset refinement: generate stylized and plain batches, de-style
//! and stylize them with per-style tuners, and keep pairs whose image
//! similarity falls inside the usability band.

mod filter;
mod manifest;
mod pipeline;
mod styles;
mod tuning;
mod usability;

pub use filter::{filter_pairs, judge, EmbeddingScorer, FilterThresholds, PairScorer, TableScorer};
pub use manifest::{BatchManifest, ImagePair, Record, Verdict};
pub use pipeline::{
    manifest_path, read_config, read_log, report, LogEntry, Pipeline, PipelineConfig, PipelineContext,
    PipelineOutcome, RunState, Stage, DEFAULT_DESTYLE_PHASES, DESTYLE_INSTRUCTION, INDEX_FILE, STYLE_INSTRUCTION,
};
pub use styles::{
    expand_prompt, load_lines, load_styles, parse_lines, parse_styles, tuner_key, Direction, StyleSpec, TunerRef,
    PLAIN_CAPTIONS, PROMPT_PLACEHOLDER, STYLES_TSV, STYLE_PROMPTS,
};
pub use tuning::{augment_pair, resize_crop, train_tuner, ModelRoundEditor, RoundEditor, TunerSchedule};
pub use usability::{round2, usability_rate, ComparisonRow, StyleRate, UsabilityComparison, UsabilityReport};
