use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sindy_bsde::bsde::{discover, AnalyticGreeks, BsdeLibraryConfig};
use sindy_bsde::diffusion::{extract_brownian, fit_sigma, SigmaFitConfig};
use sindy_bsde::market::{make_dataset, ModelParams};
use sindy_bsde::surface::train_surface;
use sindy_bsde_bench::{short_fit, training_path};

fn simulate(c: &mut Criterion) {
    let p = ModelParams::default();
    c.bench_function("simulate 25k steps", |b| b.iter(|| make_dataset(&p, black_box(25_000), 0).unwrap()));
}

fn diffusion(c: &mut Criterion) {
    let p = ModelParams::default();
    let path = training_path(25_000, 0);
    let cfg = SigmaFitConfig { drift: p.r, ..Default::default() };
    let sigma = fit_sigma(&path, &cfg).unwrap();
    let mut group = c.benchmark_group("diffusion");
    group.bench_function("fit sigma", |b| b.iter(|| fit_sigma(black_box(&path), &cfg).unwrap()));
    group.bench_function("extract increments", |b| b.iter(|| extract_brownian(black_box(&path), p.r, &sigma, 1e-8).unwrap()));
    group.finish();
}

fn surface(c: &mut Criterion) {
    let path = training_path(2_500, 0);
    let cfg = short_fit();
    let fit = train_surface(&path, &cfg).unwrap();
    let points: Vec<(f64, f64)> = path.times().iter().copied().zip(path.stock().iter().copied()).collect();
    let mut group = c.benchmark_group("surface");
    group.sample_size(10);
    group.bench_function("train short", |b| b.iter(|| train_surface(black_box(&path), &cfg).unwrap()));
    group.bench_function("derivatives 2k points", |b| b.iter(|| fit.model.eval_derivatives(black_box(&points))));
    group.finish();
}

fn discovery(c: &mut Criterion) {
    let p = ModelParams::default();
    let path = training_path(25_000, 0);
    let sigma = fit_sigma(&path, &SigmaFitConfig { drift: p.r, ..Default::default() }).unwrap();
    let db = extract_brownian(&path, p.r, &sigma, 1e-8).unwrap();
    let cfg = BsdeLibraryConfig::default();
    c.benchmark_group("discovery").sample_size(10).bench_function("analytic greeks 20k rows", |b| {
        b.iter_batched(
            || AnalyticGreeks(p),
            |g| discover(&path, &g, &db, &sigma, p.r, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, simulate, diffusion, surface, discovery);
criterion_main!(benches);
