//! Sequential versus rayon execution of the hot loops.
//!
//! Build with `--no-default-features` to benchmark the sequential fallback
//! end to end; the explicit pairs below compare both paths in one binary.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use csg::rng::{self, Rng};
use csg::tensor::{gemm_parallel, gemm_sequential, Mat};
use csg::theory::{fisher_divergence_direct, gaussian_score, sample_gaussian};
use csg::Tensor;
use std::hint::black_box;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    rng::normal_vec(rng, rows * cols)
}

fn gemm(c: &mut Criterion) {
    let mut rng = rng::seeded(0);
    let mut group = c.benchmark_group("gemm");
    // Encoder and decoder layer shapes at batch 128 and the eval batch.
    for (m, k, n) in [(128, 784, 400), (512, 784, 400), (128, 400, 784)] {
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        let mut out = vec![0.0; m * n];
        let label = format!("{m}x{k}x{n}");
        group.bench_function(BenchmarkId::new("sequential", &label), |bench| {
            bench.iter(|| {
                gemm_sequential(Mat::new(&a, m, k, false), Mat::new(&b, k, n, false), &mut out, false);
                black_box(&out);
            })
        });
        group.bench_function(BenchmarkId::new("parallel", &label), |bench| {
            bench.iter(|| {
                gemm_parallel(Mat::new(&a, m, k, false), Mat::new(&b, k, n, false), &mut out, false);
                black_box(&out);
            })
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut rng = rng::seeded(1);
    let d = 5;
    let sigma = Tensor::eye(d);
    let sigma_test = Tensor::eye(d).scale(2.0);
    let z = sample_gaussian(&sigma_test, 100_000, &mut rng).unwrap();
    let sp = gaussian_score(&sigma).unwrap();
    let st = gaussian_score(&sigma_test).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();

    let mut group = c.benchmark_group("fisher_mc");
    group.sample_size(20);
    group.bench_function("sequential", |bench| {
        bench.iter(|| single.install(|| black_box(fisher_divergence_direct(&sp, &st, &z).unwrap())))
    });
    group.bench_function("parallel", |bench| {
        bench.iter(|| black_box(fisher_divergence_direct(&sp, &st, &z).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, gemm, monte_carlo);
criterion_main!(benches);
