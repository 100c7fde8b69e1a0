use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lsmooth::graph::{batch_graph, eigendecompose, GraphOptions};
use lsmooth::network::{backward, forward, forward_with_trace, softmax_cross_entropy};
use lsmooth::regularizers::{parseval_retraction, smoothness_regularizer};
use lsmooth::robustness::{gaussian_noise_at_snr, quantize_weights};
use lsmooth::signals::make_label_signals;
use lsmooth::Matrix;
use lsmooth_bench::fixture;

fn graph_kernels(c: &mut Criterion) {
    let f = fixture(100);
    let trace = forward_with_trace(&f.model, &f.images).unwrap();
    let reps = trace.representations();
    let widest = reps.iter().max_by_key(|r| r.cols()).unwrap();

    c.bench_function("batch_graph/b100", |b| {
        b.iter(|| batch_graph(black_box(widest), GraphOptions::default()).unwrap())
    });
    let l = batch_graph(widest, GraphOptions::default()).unwrap().graph.laplacian().clone();
    c.bench_function("eigendecompose/b100", |b| b.iter(|| eigendecompose(black_box(&l)).unwrap()));
}

fn network_kernels(c: &mut Criterion) {
    let f = fixture(100);
    c.bench_function("forward/b100", |b| b.iter(|| forward(black_box(&f.model), black_box(&f.images)).unwrap()));

    let trace = forward_with_trace(&f.model, &f.images).unwrap();
    let (_, dlogits) = softmax_cross_entropy(trace.logits(), &f.labels).unwrap();
    c.bench_function("backward/b100", |b| b.iter(|| backward(&f.model, black_box(&trace), &dlogits, &[]).unwrap()));

    let signals = make_label_signals(&f.labels, 10).unwrap();
    let cfg = f.config.regularizer();
    c.bench_function("regularizer/b100_m2", |b| {
        b.iter(|| smoothness_regularizer(black_box(&trace), &signals, &cfg).unwrap())
    });
}

fn robustness_kernels(c: &mut Criterion) {
    let f = fixture(100);
    c.bench_function("gaussian_noise/b100", |b| {
        b.iter(|| gaussian_noise_at_snr(black_box(&f.images), 15.0, 0).unwrap())
    });
    c.bench_function("quantize_weights/5bit", |b| b.iter(|| quantize_weights(black_box(&f.model), 5).unwrap()));

    let w = Matrix::from_vec(32, 144, (0..32 * 144).map(|i| ((i * 37 % 101) as f64 - 50.0) / 400.0).collect()).unwrap();
    c.bench_function("parseval_retraction/32x144", |b| {
        b.iter_batched(|| w.clone(), |w| parseval_retraction(&w, 0.01).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, graph_kernels, network_kernels, robustness_kernels);
criterion_main!(benches);
