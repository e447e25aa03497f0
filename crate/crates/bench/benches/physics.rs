use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metalopt_core::adjoint::power_gradient;
use metalopt_core::{ExperimentConfig, SolveOptions};

fn design(n: usize) -> Vec<f64> {
    // A busbar-rooted stripe pattern, closer to an optimized design than a
    // uniform field.
    (0..n * n)
        .map(|e| if (e / n) % 8 == 3 { 0.9 } else { 0.05 })
        .collect()
}

fn solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    for n in [32, 64, 100] {
        let model = ExperimentConfig::square(n).model().unwrap();
        let x = design(n);
        let opts = SolveOptions::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| model.solve_converged(&x, &opts).unwrap())
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_and_gradient");
    group.sample_size(10);
    for n in [32, 64, 100] {
        let model = ExperimentConfig::square(n).model().unwrap();
        let x = design(n);
        let opts = SolveOptions::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| power_gradient(&model, &x, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, solve, gradient);
criterion_main!(benches);
