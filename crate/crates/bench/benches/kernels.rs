use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mcvi::evaluate::{exact_log_evidence, LinearGaussian};
use mcvi::linalg::{matmul, Cholesky};
use mcvi::optim::fit;
use mcvi::{elbo_gradients, TrainConfig};
use mcvi_bench::{problem, random_matrix};

fn linalg(c: &mut Criterion) {
    let mut group = c.benchmark_group("linalg");
    for n in [16, 64, 128] {
        let a = random_matrix(1, n, n);
        let b = random_matrix(2, n, n);
        group.bench_with_input(BenchmarkId::new("matmul", n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
        let mut spd = matmul(&a.transpose(), &a).unwrap();
        for i in 0..n {
            spd.set(i, i, spd.get(i, i) + n as f64);
        }
        group.bench_with_input(BenchmarkId::new("cholesky", n), &n, |bench, _| {
            bench.iter(|| Cholesky::new(black_box(&spd)).unwrap())
        });
    }
    group.finish();
}

fn bound(c: &mut Criterion) {
    let mut group = c.benchmark_group("elbo_gradients");
    for channels in [2, 5, 10] {
        let (model, data) = problem(channels, 32, 4, 64);
        group.bench_with_input(BenchmarkId::from_parameter(channels), &channels, |bench, _| {
            bench.iter(|| elbo_gradients(black_box(&model), black_box(&data), 7, 1).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let (model, data) = problem(3, 16, 4, 1000);
    let cfg = TrainConfig {
        epochs: 1,
        log_every: 0,
        ..Default::default()
    };
    c.bench_function("fit_one_epoch", |bench| {
        bench.iter(|| {
            let mut m = model.clone();
            fit(&mut m, black_box(&data), &cfg, None).unwrap()
        })
    });
    let truth = LinearGaussian::from(&model);
    c.bench_function("exact_log_evidence", |bench| {
        bench.iter(|| exact_log_evidence(black_box(&truth), black_box(&data)).unwrap())
    });
}

criterion_group!(benches, linalg, bound, training);
criterion_main!(benches);
