//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Runs without the libtest harness so the lines reach stdout as they are
//! produced. Exits non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use stylebooth::backends::{TextEncoder, ToyConfig, ToyTextEncoder};
use stylebooth::editing::{
    cfg_predict, combine_guidance, prepare_batch, training_loss, Denoiser, DropoutConfig, EditingModel,
    GuidanceConfig, ModelConfig, ModelEditor, NoiseDraw, Precision, TrainReport, Trainable, TrainingExample,
};
use stylebooth::exemplar::{rank_exemplars, sample_exemplar, ExemplarIndex};
use stylebooth::image::Image;
use stylebooth::instruction::{
    align, bind, compose_instruction, encode_text, insert, parse_template, AlignmentConfig,
    AlignmentLayer, BoundInstruction, ExemplarRef, Padding, ScaleWeights, SlotKind, TokenTag, VisualTokens,
};
use stylebooth::metrics::{clip_directional, clip_image_sim, clip_output_sim, load_benchmark, EvalRecord};
use stylebooth::refinery::{
    filter_pairs, parse_styles, read_log, report, usability_rate, EmbeddingScorer, FilterThresholds, ImagePair,
    ModelRoundEditor, Pipeline, PipelineConfig, PipelineContext, RoundEditor, TableScorer, TunerRef,
    TunerSchedule, UsabilityComparison, Verdict, STYLES_TSV,
};
use stylebooth::service::{start, EditJob, GuidedEditor, JobStatus, JobStore, ServiceConfig};
use stylebooth::Error;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn run(name: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = t.elapsed();
    let r = match r {
        Ok(d) if elapsed > budget => Err(format!("{d}; took {elapsed:.2?}, budget {budget:?}")),
        other => other,
    };
    match &r {
        Ok(d) => println!("PASS  {name:<28} {d} [{elapsed:.2?}]"),
        Err(d) => println!("FAIL  {name:<28} {d} [{elapsed:.2?}]"),
    }
    r.is_ok()
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        run("alignment geometry", secs(1), alignment_geometry),
        run("insertion suite", secs(10), insertion_suite),
        run("scale weighting", secs(5), scale_weighting),
        run("cfg algebra", secs(60), cfg_algebra),
        run("gradient check", secs(60), gradient_check),
        run("end-to-end toy training", secs(600), e2e_training),
        run("usability fixtures", secs(60), usability_fixtures),
        run("threshold behavior", secs(1), thresholds),
        run("metric oracle", secs(60), metric_oracle),
        run("exemplar selection", secs(60), exemplar_selection),
        run("pipeline smoke", secs(600), pipeline_smoke),
        run("service", secs(120), service),
    ];
    let failed = results.iter().filter(|r| !**r).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    t.to_dtype(DType::F32).unwrap().to_vec2::<f32>().unwrap()
}

fn flat64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn gradient_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = common::content(size, &mut rng);
    common::render(&c, size, if seed % 2 == 0 { "warm" } else { "cool" })
}

// ---------------------------------------------------------------- geometry

fn alignment_geometry() -> Check {
    let cfg = AlignmentConfig::new(16, 16);
    ensure!(cfg.kernel == 6 && cfg.stride == 4, "default kernel/stride {}/{}", cfg.kernel, cfg.stride);
    let default = ok(cfg.with_grid(14).token_count())?;
    ensure!(default == 9, "g=14 gives {default} tokens");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for g in 6..=32usize {
        // conv arithmetic: number of window origins 0, s, 2s, .. with origin + k <= g
        let per_axis = (0..g).step_by(4).filter(|o| o + 6 <= g).count();
        let c = AlignmentConfig::new(4, 5).with_grid(g);
        let n = ok(c.token_count())?;
        ensure!(n == per_axis * per_axis, "g={g}: {n} tokens, oracle {}", per_axis * per_axis);
        let layer = ok(AlignmentLayer::init(c, g as u64, DType::F32))?;
        let grid = ok(stylebooth::instruction::PatchGrid::new(random_tensor(&[4, g, g], &mut rng)))?;
        let out = ok(align(&grid, &layer))?;
        ensure!(out.len() == n && out.dim() == 5, "g={g}: align emitted {}x{}", out.len(), out.dim());
    }
    Ok(format!("g=14 -> {default} tokens; g in [6,32] match the window-count oracle"))
}

// ---------------------------------------------------------------- insertion

const WORDS: [&str; 10] = ["make", "this", "photo", "look", "like", "a", "painting", "in", "the", "manner"];
const STYLE_NAMES: [&str; 5] = ["Cubism", "art deco", "ukiyo e", "Fauvism", "pop art"];

fn random_bound(rng: &mut ChaCha8Rng) -> BoundInstruction {
    let n_words = rng.random_range(1..8);
    let n_slots = rng.random_range(0..4);
    let mut parts: Vec<String> = (0..n_words).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
    for _ in 0..n_slots {
        let at = rng.random_range(0..=parts.len());
        let slot = if rng.random_bool(0.5) { "<style>" } else { "<image>" };
        parts.insert(at, slot.to_string());
    }
    let t = parse_template(&parts.join(" ")).unwrap();
    let styles = (0..t.count(SlotKind::Style))
        .map(|_| STYLE_NAMES[rng.random_range(0..STYLE_NAMES.len())].to_string())
        .collect();
    let ex = (0..t.count(SlotKind::Image))
        .map(|i| ExemplarRef::inline(format!("e{i}"), Image::filled(4, 4, [0.5; 3]).unwrap()))
        .collect();
    bind(t, styles, ex, ScaleWeights::default()).unwrap()
}

fn insertion_suite() -> Check {
    let cfg = ToyConfig {
        max_length: 24,
        ..ToyConfig::default()
    };
    let enc = ToyTextEncoder::new(&cfg);
    let d = cfg.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut spliced, mut pad_dropped, mut overflowed, mut text_rows) = (0, 0, 0, 0usize);
    for case in 0..200 {
        let bound = random_bound(&mut rng);
        let h = ok(encode_text(&bound, &enc, Padding::ToMax))?;
        let ids = ok(enc.tokenize(&bound.text()))?;
        let image_slots: Vec<usize> = bound
            .template()
            .slots()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SlotKind::Image)
            .map(|(i, _)| i)
            .collect();
        let groups: Vec<VisualTokens> = image_slots
            .iter()
            .map(|_| {
                let n = rng.random_range(1..=9);
                VisualTokens::new(random_tensor(&[n, d], &mut rng)).unwrap()
            })
            .collect();

        // splice oracle over the padded sequence
        let base = rows(h.embeddings());
        let mut want_rows = Vec::new();
        let mut want_tags = Vec::new();
        let mut k = 0;
        for (i, row) in base.iter().enumerate() {
            if i < ids.len() && ids[i] == enc.placeholder_id() {
                want_rows.extend(rows(groups[k].tokens()));
                want_tags.extend(std::iter::repeat_n(TokenTag::Visual(image_slots[k]), groups[k].len()));
                k += 1;
            } else {
                want_rows.push(row.clone());
                want_tags.push(if i < ids.len() { TokenTag::Text } else { TokenTag::Pad });
            }
        }
        ensure!(k == groups.len(), "case {case}: oracle found {k} placeholders for {} groups", groups.len());
        let content = want_tags.iter().filter(|t| **t != TokenTag::Pad).count();
        let got = insert(&h, &groups);
        if content > cfg.max_length {
            ensure!(
                matches!(got, Err(Error::Overflow { .. })),
                "case {case}: {content} content tokens should overflow, got {got:?}"
            );
            overflowed += 1;
            continue;
        }
        if want_rows.len() > cfg.max_length {
            pad_dropped += 1;
            want_rows.truncate(cfg.max_length);
            want_tags.truncate(cfg.max_length);
        }
        let got = got.map_err(|e| format!("case {case} `{}`: {e}", bound.text()))?;
        ensure!(got.tags() == want_tags.as_slice(), "case {case}: tags differ");
        let got_rows = rows(got.embeddings());
        ensure!(got_rows == want_rows, "case {case}: embeddings differ from the splice oracle");
        text_rows += got.tags().iter().filter(|t| **t == TokenTag::Text).count();
        if !groups.is_empty() {
            spliced += 1;
        }
    }
    ensure!(overflowed > 0 && pad_dropped > 0, "overflow policy not exercised: {overflowed} errors, {pad_dropped} pad drops");
    Ok(format!(
        "200 cases bit-exact ({spliced} spliced, {text_rows} text rows kept); overflow: {pad_dropped} pad-drop, {overflowed} refused"
    ))
}

// ---------------------------------------------------------------- weighting

fn scale_weighting() -> Check {
    let toy = ToyConfig {
        max_length: 32,
        ..ToyConfig::default()
    };
    let backends = stylebooth::backends::Backends::toy(&toy);
    let layer = ok(AlignmentLayer::init(
        AlignmentConfig::new(toy.patch_dim, toy.hidden_dim).with_grid(toy.grid),
        3,
        DType::F32,
    ))?;
    let template = "Make it <style> with the look of <image> and a hint of <style>";
    let compose = |alphas: Vec<f32>, weighted: bool| {
        let t = parse_template(template).unwrap();
        let ex = ExemplarRef::inline("ex", gradient_image(16, 3));
        let b = bind(t, vec!["art deco".into(), "Cubism".into()], vec![ex], ScaleWeights::new(alphas).unwrap()).unwrap();
        compose_instruction(&b, backends.text.as_ref(), backends.image.as_ref(), Some(&layer), Padding::ToMax, weighted)
            .unwrap()
    };
    let plain = compose(vec![], false);
    let unit = compose(vec![1.0; 3], true);
    ensure!(rows(plain.embeddings()) == rows(unit.embeddings()), "alpha = 1 is not the identity");
    let base = rows(unit.embeddings());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for slot in 0..3 {
        let span = unit.span_for(slot).ok_or(format!("no span for slot {slot}"))?.range.clone();
        ensure!(!span.is_empty(), "slot {slot} has an empty span");
        for _ in 0..4 {
            let a = rng.random_range(0.0..2.0f32);
            let mut alphas = vec![1.0; 3];
            alphas[slot] = a;
            let got = rows(compose(alphas, true).embeddings());
            for (i, (g, b)) in got.iter().zip(&base).enumerate() {
                if span.contains(&i) {
                    for (x, y) in g.iter().zip(b) {
                        worst = worst.max((*x as f64 - a as f64 * *y as f64).abs());
                    }
                } else {
                    ensure!(g == b, "slot {slot} alpha {a} changed row {i} outside its span");
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "span rows deviate from alpha * h by {worst:e}");
    Ok(format!("identity bit-exact; linear within {worst:.1e}; 3 slots isolated"))
}

// ---------------------------------------------------------------- guidance

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(vec![v], (1, 1), &Device::Cpu).unwrap()
}

fn cfg_algebra() -> Check {
    // scalar case evaluated by hand: 0 + 1.5 * (1 - 0) + 7.5 * (3 - 1)
    let g = GuidanceConfig {
        image_scale: 1.5,
        text_scale: 7.5,
        rescale: 0.0,
    };
    let v = flat64(&ok(combine_guidance(&scalar(0.0), &scalar(1.0), &scalar(3.0), &g))?)[0];
    ensure!(v == 16.5, "scalar case gave {v}");

    // unit scales reduce to the fully conditioned prediction on the toy denoiser
    let backends = common::toy_backends(8);
    let model = ok(EditingModel::new(ModelConfig::for_backends(&backends, 9), backends.clone()))?;
    let view = ok(model.view(&Trainable::None))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = random_tensor(&[2, 3, 8, 8], &mut rng);
    let cond = random_tensor(&[2, 3, 8, 8], &mut rng);
    let ctx = ok(model.instruction_context(&common::style_instruction("warm"), &view.alignment))?;
    let ctx = ok(Tensor::stack(&[&ctx, &ctx], 0))?;
    let null = ok(model.null_context())?;
    let null = ok(Tensor::stack(&[&null, &null], 0))?;
    let unit = GuidanceConfig {
        image_scale: 1.0,
        text_scale: 1.0,
        rescale: 0.0,
    };
    let guided = flat64(&ok(cfg_predict(&view.unet, &z, 500, &ctx, &null, &cond, &unit))?);
    let direct = flat64(&ok(view.unet.predict_noise(&z, &[500, 500], &ctx, &cond))?);
    let unit_err = guided.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(unit_err <= 1e-6, "unit scales deviate by {unit_err:e}");

    // affine in each scale: equal forward differences, slope = branch delta
    let uncond = random_tensor(&[1, 16], &mut rng).to_dtype(DType::F64).unwrap();
    let img = random_tensor(&[1, 16], &mut rng).to_dtype(DType::F64).unwrap();
    let full = random_tensor(&[1, 16], &mut rng).to_dtype(DType::F64).unwrap();
    let at = |si: f64, st: f64| {
        let c = GuidanceConfig {
            image_scale: si,
            text_scale: st,
            rescale: 0.0,
        };
        flat64(&combine_guidance(&uncond, &img, &full, &c).unwrap())
    };
    let (u, i, f) = (flat64(&uncond), flat64(&img), flat64(&full));
    let h = 0.25;
    let mut worst = 0f64;
    for (s0, t0) in [(1.5, 7.5), (0.0, 0.0), (3.0, -2.0)] {
        let (p0, pi1, pi2) = (at(s0, t0), at(s0 + h, t0), at(s0 + 2.0 * h, t0));
        let (pt1, pt2) = (at(s0, t0 + h), at(s0, t0 + 2.0 * h));
        for k in 0..16 {
            let di1 = (pi1[k] - p0[k]) / h;
            let di2 = (pi2[k] - pi1[k]) / h;
            let dt1 = (pt1[k] - p0[k]) / h;
            let dt2 = (pt2[k] - pt1[k]) / h;
            for e in [di1 - di2, di1 - (i[k] - u[k]), dt1 - dt2, dt1 - (f[k] - i[k])] {
                worst = worst.max(e.abs());
            }
        }
    }
    ensure!(worst <= 1e-9, "finite-difference slopes deviate by {worst:e}");
    Ok(format!("scalar 16.5 exact; unit-scale error {unit_err:.1e}; affine slopes within {worst:.1e}"))
}

// ---------------------------------------------------------------- gradients

fn gradient_check() -> Check {
    let backends = common::toy_backends(8);
    let model = ok(EditingModel::new(
        ModelConfig::for_backends(&backends, 5).with_precision(Precision::F64),
        backends.clone(),
    ))?;
    let examples: Vec<TrainingExample> = common::two_style_pairs(2, 8, 5).into_iter().map(|p| p.0).collect();
    let frozen = ok(model.view(&Trainable::None))?;
    let batch = ok(prepare_batch(&model, &examples.iter().collect::<Vec<_>>(), &frozen.alignment))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = ok(NoiseDraw::sample(&[2, 3, 8, 8], 1000, &DropoutConfig::none(), &mut rng, DType::F64))?;
    draw.timesteps = vec![120, 640];
    let null = ok(model.null_context())?;
    let loss = |m: &EditingModel| -> f64 {
        let v = m.view(&Trainable::None).unwrap();
        let l = training_loss(&v.unet, m.schedule(), &batch, &draw, &null).unwrap();
        l.to_scalar::<f64>().unwrap()
    };

    let view = ok(model.view(&Trainable::All))?;
    let l = ok(training_loss(&view.unet, model.schedule(), &batch, &draw, &null))?;
    let grads = ok(l.backward())?;

    let names: Vec<String> = model
        .store()
        .names()
        .filter(|n| !n.starts_with("align."))
        .map(str::to_string)
        .collect();
    let eps = 1e-6;
    let mut worst = 0f64;
    let mut checked = 0;
    for k in 0..120 {
        let name = &names[k % names.len()];
        let var = ok(model.store().get(name))?;
        let dims = var.dims().to_vec();
        let values = flat64(var.as_tensor());
        let idx = rng.random_range(0..values.len());
        let analytic = grads.get(var.as_tensor()).map(|g| flat64(g)[idx]).unwrap_or(0.0);
        let at = |delta: f64| {
            let mut v = values.clone();
            v[idx] += delta;
            model.store().set(name, &Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
            loss(&model)
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        ok(model.store().set(name, &Tensor::from_vec(values.clone(), dims.as_slice(), &Device::Cpu).unwrap()))?;
        // absolute floor keeps exactly-zero gradients from dividing by zero
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    ensure!(checked >= 100, "only {checked} parameters checked");
    ensure!(worst < 1e-4, "worst relative error {worst:e}");
    Ok(format!("{checked} parameters, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- training

fn e2e_training() -> Check {
    let out = common::run_e2e(600, 20, 3);
    let TrainReport {
        initial_eval_loss: a,
        final_eval_loss: b,
        ..
    } = out.report;
    ensure!(b <= 0.5 * a, "final loss {b:.4} above half of initial {a:.4}");
    ensure!(
        out.closer * 5 >= out.evaluated * 4,
        "only {}/{} edits closer to the target style",
        out.closer,
        out.evaluated
    );
    Ok(format!("loss {a:.4} -> {b:.4}; {}/{} edits closer to the target style", out.closer, out.evaluated))
}

// ---------------------------------------------------------------- usability

/// Reference per-style usability rows: pass counts out of 217 for the
/// vanilla and the refined de-style batch, and the printed percentages.
const TABLE: [(&str, usize, usize, f64, f64, f64); 5] = [
    ("artstyle-psychedelic", 19, 208, 8.76, 95.85, 87.10),
    ("Suprematism", 32, 210, 14.75, 96.77, 82.03),
    ("misc-disco", 12, 174, 5.53, 80.18, 74.65),
    ("Cubism", 45, 205, 20.74, 94.47, 73.73),
    ("Constructivism", 51, 209, 23.50, 96.31, 72.81),
];
const TOTAL: usize = 217;
const STYLE_COUNT: usize = 67;
const AVERAGE: (f64, f64, f64) = (38.11, 79.91, 41.80);
const PAIRED_TOL: f64 = 0.01;

/// Mocked similarity table: `passed` pairs inside the band, the rest split
/// between the two rejection sides.
fn mocked_pairs(style: &str, round: &str, passed: usize, sims: &mut HashMap<String, f64>) -> Vec<ImagePair> {
    (0..TOTAL)
        .map(|i| {
            let id = format!("{round}-{style}-{i}");
            let s = if i < passed {
                0.5
            } else if i % 2 == 0 {
                0.95
            } else {
                0.05
            };
            sims.insert(id.clone(), s);
            ImagePair::new(&id, format!("{id}-src.png"), format!("{id}-tgt.png"), style, round)
        })
        .collect()
}

fn usability_fixtures() -> Check {
    // The remaining styles share the leftover passes so the 67-style totals
    // are 5541 and 11618 out of 67 * 217.
    let (rest1, rest2) = (5541 - TABLE.iter().map(|r| r.1).sum::<usize>(), 11618 - TABLE.iter().map(|r| r.2).sum::<usize>());
    let others = STYLE_COUNT - TABLE.len();
    let split = |total: usize, i: usize| total / others + usize::from(i < total % others);
    let mut counts: Vec<(String, usize, usize)> = TABLE.iter().map(|r| (r.0.to_string(), r.1, r.2)).collect();
    counts.extend((0..others).map(|i| (format!("style-{i:02}"), split(rest1, i), split(rest2, i))));

    let mut sims = HashMap::new();
    let mut a1 = Vec::new();
    let mut a2 = Vec::new();
    for (s, p1, p2) in &counts {
        a1.extend(mocked_pairs(s, "A1", *p1, &mut sims));
        a2.extend(mocked_pairs(s, "A2", *p2, &mut sims));
    }
    let scorer = TableScorer(sims);
    let th = FilterThresholds::default();
    let r1 = ok(usability_rate(&ok(filter_pairs(a1, &th, &scorer, Path::new(".")))?))?;
    let r2 = ok(usability_rate(&ok(filter_pairs(a2, &th, &scorer, Path::new(".")))?))?;
    let formats: BTreeMap<String, String> = ok(parse_styles(STYLES_TSV))?
        .into_iter()
        .map(|s| (s.name, s.expansion_format))
        .collect();
    let cmp = UsabilityComparison::new("A1", &r1, "A2", &r2, &formats);

    let mut worst = 0f64;
    for (row, want) in cmp.rows.iter().zip(TABLE.iter()) {
        ensure!(row.style == want.0, "row order: got {} where the table has {}", row.style, want.0);
        for (g, w) in [(row.before, want.3), (row.after, want.4), (row.delta(), want.5)] {
            worst = worst.max((g - w).abs());
        }
        ensure!(row.format.is_some(), "no expansion format for {}", row.style);
    }
    for (g, w) in [(cmp.average_before, AVERAGE.0), (cmp.average_after, AVERAGE.1), (cmp.average_delta(), AVERAGE.2)] {
        worst = worst.max((g - w).abs());
    }
    ensure!(worst <= PAIRED_TOL, "largest deviation from the table {worst:.4}");
    Ok(format!(
        "5 rows + average ({:.2} -> {:.2}, {:.2}) within {worst:.4}",
        cmp.average_before,
        cmp.average_after,
        cmp.average_delta()
    ))
}

fn thresholds() -> Check {
    let th = FilterThresholds::default();
    ensure!(th.lower == 0.2 && th.upper == 0.84, "defaults {}/{}", th.lower, th.upper);
    let cases = [
        (0.90, Verdict::TooSimilar),
        (0.10, Verdict::TooDifferent),
        (0.50, Verdict::Pass),
        (0.2, Verdict::Pass),
        (0.84, Verdict::Pass),
    ];
    for (s, want) in cases {
        let got = th.verdict(s);
        ensure!(got == want, "{s} -> {got:?}, expected {want:?}");
    }
    Ok("0.90/0.10/0.50 and inclusive bounds 0.2, 0.84".into())
}

// ---------------------------------------------------------------- metrics

fn metric_oracle() -> Check {
    let backends = common::toy_backends(16);
    let input = gradient_image(16, 1);
    let edited = gradient_image(16, 2);
    let rec = EvalRecord {
        id: "r".into(),
        input_image: "in.png".into(),
        output_image: None,
        input_caption: "a photo of a harbour".into(),
        output_caption: "a warm painting of a harbour".into(),
        instruction: "make it warm".into(),
    };
    let ei = ok(backends.image.embed(&input))?;
    let ee = ok(backends.image.embed(&edited))?;
    let ti = ok(backends.text.embed(&rec.input_caption))?;
    let to = ok(backends.text.embed(&rec.output_caption))?;
    let diff = |a: &[f32], b: &[f32]| -> Vec<f32> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let want = [
        cos64(&diff(&ee, &ei), &diff(&to, &ti)),
        cos64(&ei, &ee),
        cos64(&ee, &to),
    ];
    let got = [
        ok(clip_directional(&rec, &input, &edited, &backends))?,
        ok(clip_image_sim(&input, &edited, &backends))?,
        ok(clip_output_sim(&edited, &rec.output_caption, &backends))?,
    ];
    let worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    ensure!(worst <= 1e-6, "metrics deviate from brute force by {worst:e}");

    let dir = ok(tempfile::tempdir())?;
    ok(input.save_png(&dir.path().join("a.png")))?;
    ok(edited.save_png(&dir.path().join("b.png")))?;
    ok(Image::filled(16, 16, [0.2, 0.2, 0.2]).and_then(|i| i.save_png(&dir.path().join("c.png"))))?;
    let lines: Vec<String> = ["a", "b", "c"]
        .iter()
        .map(|id| {
            serde_json::json!({
                "id": id,
                "input_image": format!("{id}.png"),
                "input_caption": "a photo",
                "output_caption": "a painting",
                "instruction": "make it a painting",
            })
            .to_string()
        })
        .collect();
    ok(std::fs::write(dir.path().join("records.jsonl"), lines.join("\n")))?;
    let bench = ok(load_benchmark(dir.path()))?;
    ensure!(bench.records.len() == 2, "{} records kept", bench.records.len());
    ensure!(bench.blank.len() == 1 && bench.blank[0].id.as_deref() == Some("c"), "blank: {:?}", bench.blank);
    Ok(format!("dir/img/out within {worst:.1e}; 3-record fixture -> 2"))
}

// ---------------------------------------------------------------- exemplars

fn exemplar_selection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let emb: Vec<(String, Vec<f32>)> = (0..40)
        .map(|i| (format!("img{i:02}"), (0..8).map(|_| rng.random_range(-1.0..1.0f32)).collect()))
        .collect();
    let idx = ok(rank_exemplars("s", &emb))?;
    for (id, e) in &emb {
        let mut brute: Vec<(f64, &str)> = emb
            .iter()
            .filter(|(o, _)| o != id)
            .map(|(o, f)| (cos64(e, f), o.as_str()))
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let got: Vec<&str> = idx.candidates(id).unwrap().into_iter().map(|c| c.0).collect();
        let want: Vec<&str> = brute.iter().map(|b| b.1).collect();
        ensure!(got == want, "ranking for {id} differs from the brute-force sort");
    }

    let index = ok(ExemplarIndex::build(&BTreeMap::from([("s".to_string(), emb.clone())])))?;
    let top: Vec<String> = idx.candidates("img00").unwrap()[..10].iter().map(|c| c.0.to_string()).collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut draws = ChaCha8Rng::seed_from_u64(12);
    const N: usize = 10_000;
    for _ in 0..N {
        let pick = ok(sample_exemplar(&index, "img00", 10, &mut draws))?;
        ensure!(top.contains(&pick), "drew {pick} outside the top 10");
        *counts.entry(pick).or_default() += 1;
    }
    let expected = N as f64 / 10.0;
    let chi2: f64 = top
        .iter()
        .map(|id| (counts.get(id).copied().unwrap_or(0) as f64 - expected).powi(2) / expected)
        .sum();
    // chi-square critical value, 9 degrees of freedom, p = 0.001
    const CHI2_CRIT: f64 = 27.877;
    ensure!(chi2 < CHI2_CRIT, "chi-square {chi2:.2} over top-10 counts");
    for (id, _) in &emb {
        for _ in 0..50 {
            let pick = ok(sample_exemplar(&index, id, 10, &mut draws))?;
            ensure!(&pick != id, "{id} drew itself");
        }
    }
    Ok(format!("rankings match brute force; chi2 {chi2:.2} < {CHI2_CRIT}; no self draws in 2000"))
}

// ---------------------------------------------------------------- pipeline

/// Toy round editor that can be made to fail, to interrupt a run.
struct Interruptible {
    inner: ModelRoundEditor,
    broken: AtomicBool,
}

impl RoundEditor for Interruptible {
    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn edit(&self, image: &Image, instruction: &BoundInstruction, tuner: Option<&TunerRef>, seed: u64) -> stylebooth::Result<Image> {
        if self.broken.load(Ordering::SeqCst) {
            return Err(Error::Backend("editor offline".into()));
        }
        self.inner.edit(image, instruction, tuner, seed)
    }

    fn train(&self, examples: &[TrainingExample], tuner: &TunerRef, schedule: &TunerSchedule) -> stylebooth::Result<TrainReport> {
        self.inner.train(examples, tuner, schedule)
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, (u64, std::time::SystemTime)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let m = std::fs::metadata(&p).unwrap();
                out.insert(p.display().to_string(), (m.len(), m.modified().unwrap()));
            }
        }
    }
    out
}

fn pipeline_smoke() -> Check {
    const SIZE: usize = 16;
    let backends = common::toy_backends(SIZE);
    let model = ok(EditingModel::new(ModelConfig::for_backends(&backends, 21), backends.clone()))?;
    let editor = Arc::new(Interruptible {
        inner: ModelRoundEditor::new(Arc::new(model), GuidanceConfig::default(), 4),
        broken: AtomicBool::new(true),
    });
    let ctx = PipelineContext {
        t2i: backends.t2i.clone(),
        editor: editor.clone(),
        scorer: Arc::new(EmbeddingScorer::new(backends.image.clone())),
        encoder: backends.image.clone(),
    };
    let styles: Vec<_> = ok(parse_styles(STYLES_TSV))?.into_iter().take(2).collect();
    let subjects = ["a cat", "a lighthouse", "a bowl of fruit", "a city street", "a mountain lake", "an old car", "a violin", "a sailboat"];
    let prompts: Vec<String> = subjects.iter().map(|s| s.to_string()).collect();
    let captions: Vec<String> = subjects.iter().map(|s| format!("a photo of {s}")).collect();
    let mut config = PipelineConfig::new(styles, prompts, captions);
    config.seed = 21;
    config.tuner = TunerSchedule::toy(20, SIZE);
    let stages: Vec<String> = config.stages().iter().map(|s| s.name()).collect();

    let dir = ok(tempfile::tempdir())?;
    let run_dir = dir.path().join("run");
    let mut p = ok(Pipeline::create(&run_dir, config, ctx.clone()))?;
    let first = p.run();
    ensure!(first.is_err(), "run with a failing editor should stop");
    let done_before = p.state().completed.clone();
    ensure!(
        done_before.len() >= 2 && done_before.len() < stages.len(),
        "interrupted run completed {done_before:?}"
    );

    editor.broken.store(false, Ordering::SeqCst);
    let mut p = ok(Pipeline::open(&run_dir, ctx.clone()))?;
    let out = ok(p.run())?;
    ensure!(p.is_complete(), "pipeline not complete after resume");
    ensure!(
        out.ran.iter().all(|s| !done_before.contains(s)),
        "resume re-ran finished stages: {:?}",
        out.ran
    );
    let log = ok(read_log(&run_dir))?;
    let finished: Vec<&str> = log.iter().filter(|e| e.event == "done").map(|e| e.stage.as_str()).collect();
    ensure!(finished == stages.iter().map(String::as_str).collect::<Vec<_>>(), "stage order {finished:?}");

    let before = snapshot(&run_dir);
    std::thread::sleep(Duration::from_millis(20));
    let mut p = ok(Pipeline::open(&run_dir, ctx))?;
    let again = ok(p.run())?;
    ensure!(again.ran.is_empty(), "rerun executed {:?}", again.ran);
    ensure!(snapshot(&run_dir) == before, "rerun modified the run directory");
    let cmp = ok(report(&run_dir))?;
    Ok(format!(
        "{} stages in order, resumed after {} finished, {} tuners, {} final pairs, A1 {:.1}% -> A2 {:.1}%; rerun no-op",
        stages.len(),
        done_before.len(),
        p.state().tuners.len(),
        out.final_pairs,
        cmp.average_before,
        cmp.average_after
    ))
}

// ---------------------------------------------------------------- service

/// Holds every edit until the gate opens.
struct Gated {
    inner: ModelEditor,
    gate: Arc<(Mutex<bool>, Condvar)>,
}

impl GuidedEditor for Gated {
    fn edit_guided(&self, image: &Image, instruction: &BoundInstruction, guidance: &GuidanceConfig, seed: u64) -> stylebooth::Result<Image> {
        let (open, cv) = &*self.gate;
        let mut g = open.lock().unwrap();
        while !*g {
            g = cv.wait(g).unwrap();
        }
        drop(g);
        self.inner.edit_guided(image, instruction, guidance, seed)
    }
}

const BOUNDARY: &str = "acceptance-boundary";

fn multipart(image: &[u8], body: Option<&serde_json::Value>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"in.png\"\r\nContent-Type: image/png\r\n\r\n"
    ).bytes());
    out.extend_from_slice(image);
    out.extend(b"\r\n");
    if let Some(b) = body {
        out.extend(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"body\"\r\n\r\n{b}\r\n").bytes());
    }
    out.extend(format!("--{BOUNDARY}--\r\n").bytes());
    out
}

async fn call(router: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), 1 << 24).await.unwrap();
    (status, bytes.to_vec())
}

async fn submit(router: &axum::Router, image: &[u8], body: serde_json::Value, key: Option<&str>) -> (StatusCode, serde_json::Value) {
    let mut req = Request::post("/v1/edits").header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"));
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let (s, b) = call(router, req.body(Body::from(multipart(image, Some(&body)))).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or_default())
}

async fn status_of(router: &axum::Router, id: &str) -> serde_json::Value {
    let (_, b) = call(router, Request::get(format!("/v1/edits/{id}")).body(Body::empty()).unwrap()).await;
    serde_json::from_slice(&b).unwrap()
}

async fn wait_for(router: &axum::Router, id: &str, status: &str) -> Result<serde_json::Value, String> {
    for _ in 0..600 {
        let v = status_of(router, id).await;
        if v["status"] == status {
            return Ok(v);
        }
        if v["status"] == "FAILED" {
            return Err(format!("job {id} failed: {}", v["error"]));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    Err(format!("job {id} never reached {status}"))
}

fn service() -> Check {
    let rt = ok(tokio::runtime::Runtime::new())?;
    rt.block_on(service_checks())
}

async fn service_checks() -> Check {
    let backends = common::toy_backends(16);
    let model = Arc::new(ok(EditingModel::new(ModelConfig::for_backends(&backends, 2), backends))?);
    let gate = Arc::new((Mutex::new(false), Condvar::new()));
    let editor = Arc::new(Gated {
        inner: ModelEditor::new(model.clone(), GuidanceConfig::default(), 2),
        gate: gate.clone(),
    });
    let dir = ok(tempfile::tempdir())?;
    let cfg = ServiceConfig {
        data_dir: dir.path().to_path_buf(),
        workers: 1,
        ..ServiceConfig::default()
    };
    let styles = ok(parse_styles(STYLES_TSV))?;
    let svc = ok(start(&cfg, editor.clone(), styles.clone()))?;
    let r = &svc.router;
    let png = ok(gradient_image(16, 7).encode_png())?;
    let body = serde_json::json!({
        "instruction": "Let this image be in the style of <style>",
        "styles": ["Cubism"],
        "seed": 3,
    });

    // lifecycle
    let (s, v) = submit(r, &png, body.clone(), Some("key-1")).await;
    ensure!(s == StatusCode::ACCEPTED && v["status"] == "QUEUED", "submit: {s} {v}");
    let id = v["job_id"].as_str().unwrap_or_default().to_string();
    wait_for(r, &id, "RUNNING").await?;
    let (s, _) = call(r, Request::get(format!("/v1/edits/{id}/result")).body(Body::empty()).unwrap()).await;
    ensure!(s == StatusCode::CONFLICT, "result before completion: {s}");

    // idempotency
    let (s, v) = submit(r, &png, body.clone(), Some("key-1")).await;
    ensure!(s == StatusCode::OK && v["job_id"] == id.as_str() && v["replayed"] == true, "replay: {s} {v}");
    ensure!(svc.store.list().len() == 1, "replay created a second job");

    {
        let (open, cv) = &*gate;
        *open.lock().unwrap() = true;
        cv.notify_all();
    }
    let done = wait_for(r, &id, "DONE").await?;
    ensure!(done["result_url"].is_string(), "no result_url: {done}");
    let (s, bytes) = call(r, Request::get(format!("/v1/edits/{id}/result")).body(Body::empty()).unwrap()).await;
    let out = ok(Image::decode(&bytes))?;
    ensure!(s == StatusCode::OK && out.width() == 16, "result: {s}");
    ensure!(
        ok(svc.store.transition(&id, JobStatus::Running, None, None)).is_err(),
        "DONE job moved back to RUNNING"
    );

    // arity and parse errors
    let bad = serde_json::json!({ "instruction": "in the style of <style> and <style>", "styles": ["Cubism"] });
    let (s, v) = submit(r, &png, bad, None).await;
    ensure!(
        s == StatusCode::BAD_REQUEST && v["error"] == "arity" && v["expected"] == 2 && v["given"] == 1,
        "style arity: {s} {v}"
    );
    let bad = serde_json::json!({ "instruction": "like <image>", "exemplar_ids": [] });
    let (s, v) = submit(r, &png, bad, None).await;
    ensure!(s == StatusCode::BAD_REQUEST && v["error"] == "arity" && v["slot"] == "image", "image arity: {s} {v}");
    let bad = serde_json::json!({ "instruction": "make it <styl" });
    let (s, v) = submit(r, &png, bad, None).await;
    ensure!(s == StatusCode::BAD_REQUEST && v["error"] == "parse" && v["offset"].is_number(), "parse: {s} {v}");
    let (s, _) = call(r, Request::get("/v1/edits/nope").body(Body::empty()).unwrap()).await;
    ensure!(s == StatusCode::NOT_FOUND, "unknown job: {s}");

    // restart recovery: a job left RUNNING by a dead process
    let dir2 = ok(tempfile::tempdir())?;
    let orphan = {
        let (store, _) = ok(JobStore::open(dir2.path()))?;
        ok(gradient_image(16, 8).save_png(&dir2.path().join("uploads/orphan.png")))?;
        let job = EditJob {
            id: "orphan".into(),
            original: "uploads/orphan.png".into(),
            instruction: "Let this image be in the style of <style>".into(),
            styles: vec!["Cubism".into()],
            exemplar_ids: vec![],
            alphas: vec![],
            s_image: 1.5,
            s_text: 7.5,
            seed: 1,
            status: JobStatus::Queued,
            result: None,
            error: None,
            idempotency_key: None,
            recovered: false,
            created_ms: 1,
            updated_ms: 1,
        };
        ok(store.insert(job))?;
        ok(store.transition("orphan", JobStatus::Running, None, None))?;
        "orphan"
    };
    let cfg2 = ServiceConfig {
        data_dir: dir2.path().to_path_buf(),
        ..cfg.clone()
    };
    let svc2 = ok(start(&cfg2, editor, styles))?;
    ensure!(svc2.recovered == vec![orphan.to_string()], "recovered {:?}", svc2.recovered);
    let v = wait_for(&svc2.router, orphan, "DONE").await?;
    ensure!(v["recovered"] == true, "recovered flag missing: {v}");
    Ok("QUEUED->RUNNING->DONE, 409 before done, replay 200, arity/parse 400, orphan recovered".into())
}
