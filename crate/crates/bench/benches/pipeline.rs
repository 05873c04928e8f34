//! Benchmarks along the sampling hot path.
//!
//! Three tiers: the per-step guidance algebra on an SD-sized latent
//! (4x64x64), the analytic noise predictor a step invokes up to three
//! times, and a complete 50-step toy-scenario run.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use prguide_core::guidance::{decompose, pr_prediction, standardize_field};
use prguide_core::{
    make_schedule, sample, Condition, GridShape, GuidanceDecomposition, GuidanceMode,
    GuidanceScales, LatentGrid, NoisePredictor, RescaleConstants, SamplerConfig, ScalarField,
    ScheduleKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn guidance_algebra(c: &mut Criterion) {
    let (text, cons) = prguide_bench::guidance_pair(4, 64, 64);
    let scales = GuidanceScales::default();
    let consts = RescaleConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let uncond = LatentGrid::standard_normal(text.shape(), &mut rng);

    c.bench_function("decompose/4x64x64", |b| {
        b.iter(|| decompose(black_box(&cons), black_box(&text), &consts).unwrap())
    });

    c.bench_function("pr_step/4x64x64", |b| {
        b.iter(|| {
            let decomp = GuidanceDecomposition::new(
                black_box(text.clone()),
                black_box(cons.clone()),
                &scales,
                &consts,
            )
            .unwrap();
            pr_prediction(&uncond, &decomp, &scales, &consts).unwrap()
        })
    });

    let field = ScalarField::from_vec(
        64,
        64,
        (0..64 * 64).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .unwrap();
    c.bench_function("standardize/64x64", |b| {
        b.iter(|| standardize_field(black_box(&field), consts.eps_std))
    });
}

fn analytic_predictor(c: &mut Criterion) {
    let model = prguide_bench::mixture(2, 8, 8, 4);
    let schedule = make_schedule(50, ScheduleKind::Cosine).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = LatentGrid::standard_normal(GridShape::new(2, 8, 8).unwrap(), &mut rng);
    let cond = Condition::Prompt(0);

    c.bench_function("gmm_epsilon/2x8x8_k4", |b| {
        b.iter(|| model.epsilon(black_box(&x), 25, &cond, &schedule).unwrap())
    });
}

fn full_run(c: &mut Criterion) {
    let (base, personalized) = prguide_bench::personalized_pair();
    let cond = Condition::SubjectPrompt { label: 0, subject: 0 };
    let config = SamplerConfig {
        mode: GuidanceMode::Pr,
        ..SamplerConfig::default()
    };

    c.bench_function("sample_pr/50_steps_2x4x4", |b| {
        b.iter(|| sample(black_box(&config), &base, Some(&personalized), &cond).unwrap())
    });
}

criterion_group!(benches, guidance_algebra, analytic_predictor, full_run);
criterion_main!(benches);
