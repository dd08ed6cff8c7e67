//! Timings of the inner solve, derivatives, factorization and full fits.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use galamm::autodiff::gradient;
use galamm::estimation::{fit, laplace_loglik, FitOptions, InnerOptions, LaplaceObjective};
use galamm::inference::{smooth_bands, smooth_index};
use galamm::sparse::SymbolicFactorization;
use galamm::splines::{ConstrainedSmooth, CubicRegressionSpline};
use galamm_bench::{block_arrow, cognitive_scenario, ses_scenario};

fn inner(c: &mut Criterion) {
    let mut group = c.benchmark_group("laplace_loglik");
    for (name, sc) in [("ses_200", ses_scenario(200)), ("cognitive_150", cognitive_scenario(150))] {
        group.bench_function(name, |b| {
            b.iter(|| laplace_loglik(black_box(&sc.model), black_box(&sc.truth), &InnerOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn derivatives(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient");
    group.sample_size(20);
    for (name, sc) in [("ses_200", ses_scenario(200)), ("cognitive_150", cognitive_scenario(150))] {
        let obj = LaplaceObjective::new(&sc.model, InnerOptions::default()).unwrap();
        let x = sc.model.pack(&sc.truth);
        group.bench_function(name, |b| b.iter(|| gradient(&obj, black_box(&x)).unwrap()));
    }
    group.finish();
}

fn factorization(c: &mut Criterion) {
    let mut group = c.benchmark_group("ldl");
    for blocks in [50, 200, 800] {
        let a = block_arrow(blocks, 2, 3);
        let sym = SymbolicFactorization::new(&a).unwrap();
        group.bench_with_input(BenchmarkId::new("numeric", blocks), &a, |b, a| b.iter(|| sym.factorize(a).unwrap()));
        group.bench_with_input(BenchmarkId::new("symbolic", blocks), &a, |b, a| {
            b.iter(|| SymbolicFactorization::new(a).unwrap())
        });
    }
    group.finish();
}

fn splines(c: &mut Criterion) {
    let x: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.618).fract() * 4.0 - 2.0).collect();
    c.bench_function("smooth_basis_k10_n2000", |b| {
        b.iter(|| {
            let basis = CubicRegressionSpline::new(black_box(&x), 10).unwrap();
            ConstrainedSmooth::new(basis, &x).unwrap().to_mixed().unwrap()
        })
    });
}

fn fits(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    let sc = ses_scenario(100);
    let x0 = sc.model.pack(&sc.truth);
    let opts = FitOptions { hessian: false, ..Default::default() };
    group.bench_function("ses_100_from_truth", |b| b.iter(|| fit(&sc.model, Some(&x0), &opts).unwrap()));
    let f = fit(&sc.model, Some(&x0), &FitOptions::default()).unwrap();
    let k = smooth_index(&sc.model, "f_age").unwrap();
    let grid: Vec<f64> = (0..100).map(|i| -1.5 + 0.03 * i as f64).collect();
    group.bench_function("bands_ses_100_nsim_10000", |b| {
        b.iter(|| smooth_bands(&sc.model, &f, k, &grid, 0.05, 10_000, 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, inner, derivatives, factorization, splines, fits);
criterion_main!(benches);
