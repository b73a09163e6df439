use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajfed_core::autodiff::{Adam, AdamConfig, Tensor};
use trajfed_core::secure_agg::{run_aggregation_round, RoundConfig};
use trajfed_core::surrogate::{build_llm, build_slm, ModelConfig};
use trajfed_core::tke::{sample_layers, selection_probabilities};
use trajfed_core::tpa::{Normalization, TpaParams};
use trajfed_core::traj::{synth_generate, BBox, SpatioTemporalPoint};

fn bbox() -> BBox {
    BBox::new(116.20, 39.80, 116.40, 39.95)
}

fn secure_aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("secure_aggregation");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(clients, len) in &[(4usize, 1_000usize), (4, 10_000), (8, 10_000)] {
        let params: Vec<Vec<f64>> = (0..clients).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{clients}x{len}")), &params, |b, p| {
            b.iter(|| run_aggregation_round(black_box(p), &RoundConfig::new(7, 0)).unwrap())
        });
    }
    group.finish();
}

fn layer_selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer_selection");
    for &(n, nm) in &[(4usize, 1usize), (8, 4), (16, 8)] {
        let r: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let s: f64 = r.iter().sum();
        let r: Vec<f64> = r.into_iter().map(|x| x / s).collect();
        group.bench_with_input(BenchmarkId::new("closed_form", format!("{n}/{nm}")), &r, |b, r| {
            b.iter(|| selection_probabilities(black_box(r), nm).unwrap())
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        group.bench_with_input(BenchmarkId::new("sample", format!("{n}/{nm}")), &r, |b, r| {
            b.iter(|| sample_layers(black_box(r), nm, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn tpa_step(c: &mut Criterion) {
    let points: Vec<SpatioTemporalPoint> =
        synth_generate(4, 4, 100, bbox(), 3).into_iter().flat_map(|t| t.points).collect();
    let norm = Normalization::covering(&points, bbox()).unwrap();
    let mut group = c.benchmark_group("tpa_train_step");
    group.sample_size(20);
    for &batch in &[64usize, 256] {
        let mut tpa = TpaParams::init(norm.clone(), 4);
        let mut opt = Adam::new(tpa.param_count());
        let cfg = AdamConfig::with_lr(1e-3);
        let slice = &points[..batch];
        group.bench_function(BenchmarkId::from_parameter(batch), |b| {
            b.iter(|| tpa.train_step(black_box(slice), &mut opt, &cfg).unwrap())
        });
    }
    group.finish();
}

fn surrogate_forward(c: &mut Criterion) {
    let llm_cfg = ModelConfig::llm(10, 40);
    let slm_cfg = ModelConfig::slm(6, 40);
    let llm = build_llm(llm_cfg, 5).unwrap();
    let slm = build_slm(&llm, slm_cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut group = c.benchmark_group("surrogate_forward");
    for (name, model, input) in [("llm", &llm, 10usize), ("slm", &slm, 6)] {
        let x = Tensor::matrix(128, input, (0..128 * input).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        group.bench_function(BenchmarkId::new(name, 128), |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, secure_aggregation, layer_selection, tpa_step, surrogate_forward);
criterion_main!(benches);
