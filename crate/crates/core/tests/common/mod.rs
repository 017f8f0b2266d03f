//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylebooth::backends::{cosine, Backends, ToyConfig};
use stylebooth::editing::{
    finetune, EditingModel, FinetuneMode, GuidanceConfig, ModelConfig, TrainReport, TrainSchedule,
    TrainingExample,
};
use stylebooth::image::Image;
use stylebooth::instruction::{bind, parse_template, BoundInstruction, ScaleWeights};

pub const STYLES: [&str; 2] = ["warm", "cool"];

/// Smooth random luminance field in `[0, 1]`.
pub fn content(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (fx, fy, px, py) = (
        rng.random_range(0.3..1.2f32),
        rng.random_range(0.3..1.2f32),
        rng.random_range(0.0..6.28f32),
        rng.random_range(0.0..6.28f32),
    );
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            0.5 + 0.25 * (fx * x + px).sin() + 0.25 * (fy * y + py).cos()
        })
        .collect()
}

/// Renders a luminance field in one of the two palettes.
pub fn render(c: &[f32], size: usize, style: &str) -> Image {
    let (r, g, b): (Vec<f32>, Vec<f32>, Vec<f32>) = match style {
        "warm" => (c.iter().map(|v| 0.3 + 0.7 * v).collect(), c.iter().map(|v| 0.4 * v).collect(), vec![0.1; c.len()]),
        _ => (vec![0.1; c.len()], c.iter().map(|v| 0.4 * v).collect(), c.iter().map(|v| 0.3 + 0.7 * v).collect()),
    };
    let data = [r, g, b].concat();
    Image::from_planar(size, size, data).unwrap()
}

pub fn style_instruction(style: &str) -> BoundInstruction {
    let t = parse_template("Let this image be in the style of <style>").unwrap();
    bind(t, vec![style.to_string()], vec![], ScaleWeights::default()).unwrap()
}

/// Palette-swap pairs in both directions.
pub fn two_style_pairs(n: usize, size: usize, seed: u64) -> Vec<(TrainingExample, &'static str, &'static str)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = content(size, &mut rng);
            let (from, to) = if i % 2 == 0 { (STYLES[1], STYLES[0]) } else { (STYLES[0], STYLES[1]) };
            let ex = TrainingExample {
                source: render(&c, size, from),
                target: render(&c, size, to),
                instruction: style_instruction(to),
            };
            (ex, from, to)
        })
        .collect()
}

pub fn toy_backends(image_size: usize) -> Backends {
    Backends::toy(&ToyConfig {
        image_size,
        patch: 2,
        max_length: 24,
        ..ToyConfig::default()
    })
}

pub struct E2eOutcome {
    pub report: TrainReport,
    pub closer: usize,
    pub evaluated: usize,
}

/// Fine-tunes a fresh toy model on palette swaps and counts held-out edits
/// whose embedding is closer to the target palette's centroid.
pub fn run_e2e(steps: usize, eval: usize, seed: u64) -> E2eOutcome {
    const SIZE: usize = 8;
    let backends = toy_backends(SIZE);
    let mut model = EditingModel::new(ModelConfig::for_backends(&backends, seed), backends.clone()).unwrap();
    let train: Vec<TrainingExample> = two_style_pairs(64, SIZE, seed).into_iter().map(|p| p.0).collect();
    let schedule = TrainSchedule {
        batch_size: 8,
        seed,
        ..TrainSchedule::text_based().with_steps(steps, 2e-3)
    };
    let report = finetune(&mut model, FinetuneMode::TextBased, &train, &schedule).unwrap();

    let centroid = |style: &str| -> Vec<f32> {
        let mut acc = vec![0f32; backends.image.profile().joint_dim];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
        for _ in 0..32 {
            let e = backends.image.embed(&render(&content(SIZE, &mut rng), SIZE, style)).unwrap();
            acc.iter_mut().zip(e).for_each(|(a, v)| *a += v / 32.0);
        }
        acc
    };
    let cents = [centroid(STYLES[0]), centroid(STYLES[1])];
    let held_out = two_style_pairs(eval, SIZE, seed.wrapping_add(1000));
    let guidance = GuidanceConfig::default();
    let mut closer = 0;
    for (i, (ex, from, to)) in held_out.iter().enumerate() {
        let out = model.sample_edit(&ex.source, &ex.instruction, &guidance, 20, i as u64).unwrap();
        let e = backends.image.embed(&out).unwrap();
        let idx = |s: &str| STYLES.iter().position(|x| *x == s).unwrap();
        if cosine(&e, &cents[idx(to)]) > cosine(&e, &cents[idx(from)]) {
            closer += 1;
        }
    }
    E2eOutcome { report, closer, evaluated: held_out.len() }
}
