//! Kernel and training throughput on a single worker thread versus the full
//! rayon pool. Build with `--no-default-features` to measure the purely
//! sequential code path instead of the rayon backend.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use laneseg_core::data::synthetic_dataset;
use laneseg_core::layers::{conv2d_backward, conv2d_forward};
use laneseg_core::model::xavier_conv;
use laneseg_core::par::is_parallel;
use laneseg_core::tensor::sample_gaussian;
use laneseg_core::training::{train_step, LossNorm};
use laneseg_core::{build_network, Dims, NetworkConfig, Rng};
use rayon::ThreadPool;

fn pools() -> Vec<(String, ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut counts = vec![1];
    if is_parallel() && all > 1 {
        counts.push(all);
    }
    counts
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("{n}-threads"), pool)
        })
        .collect()
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = sample_gaussian(&mut rng, Dims::new(4, 16, 40, 80), 1.0).unwrap();
    let p = xavier_conv(&mut rng, 32, 16, 3).unwrap();
    let (y, cache) = conv2d_forward(&x, &p).unwrap();
    let mut group = c.benchmark_group("conv2d 4x16x40x80 -> 32");
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("forward", &label), |b| {
            pool.install(|| b.iter(|| conv2d_forward(&x, &p).unwrap()))
        });
        group.bench_function(BenchmarkId::new("backward", &label), |b| {
            pool.install(|| b.iter(|| conv2d_backward(&y, &cache, &p).unwrap()))
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let cfg = NetworkConfig::segnet_lite(32, 64);
    let samples = synthetic_dataset(4, (32, 64), 3).unwrap();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    let x = laneseg_core::Tensor4::concat_batch(&images).unwrap();
    let t = laneseg_core::Tensor4::concat_batch(&masks).unwrap();
    let mut group = c.benchmark_group("segnet-lite 32x64 batch 4");
    group.sample_size(30);
    for (label, pool) in pools() {
        let net = build_network(&cfg, &mut Rng::new(2)).unwrap();
        group.bench_function(BenchmarkId::new("forward", &label), |b| {
            pool.install(|| b.iter(|| net.forward(&x).unwrap()))
        });
        let mut net = net.clone();
        group.bench_function(BenchmarkId::new("train_step", &label), |b| {
            pool.install(|| b.iter(|| train_step(&mut net, &x, &t, 1e-6, LossNorm::PerImage).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, network);
criterion_main!(benches);
