use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use varprop::experiments::{
    finite_width_ensemble, finite_width_ensemble_seq, gradient_ensemble, gradient_ensemble_seq,
    FiniteWidthConfig, GradientConfig, GradientScheme,
};

fn finite_width(c: &mut Criterion) {
    let mut group = c.benchmark_group("finite_width");
    group.sample_size(10);
    for width in [64, 256] {
        let cfg = FiniteWidthConfig::new(width, 20, 8, 50, 1);
        group.bench_with_input(BenchmarkId::new("parallel", width), &cfg, |b, cfg| {
            b.iter(|| finite_width_ensemble(black_box(cfg)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", width), &cfg, |b, cfg| {
            b.iter(|| finite_width_ensemble_seq(black_box(cfg)).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradients");
    group.sample_size(10);
    for scheme in [GradientScheme::KaimingBn, GradientScheme::ScaleBias] {
        let cfg = GradientConfig::new(scheme, 128, 20, 8, 50, 1);
        group.bench_with_input(
            BenchmarkId::new("parallel", scheme.slug()),
            &cfg,
            |b, cfg| b.iter(|| gradient_ensemble(black_box(cfg)).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("sequential", scheme.slug()),
            &cfg,
            |b, cfg| b.iter(|| gradient_ensemble_seq(black_box(cfg)).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, finite_width, gradients);
criterion_main!(benches);
