use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metalopt_core::cnn::{self, CnnArch};

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("cnn");
    group.sample_size(10);
    for n in [32, 64, 100] {
        let arch = CnnArch::for_grid(n, n);
        let params = arch.init_params(0).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| cnn::forward(&arch, &params).unwrap())
        });
        let (img, tape) = cnn::forward(&arch, &params).unwrap();
        let probe: Vec<f64> = img.iter().map(|v| v - 0.5).collect();
        group.bench_with_input(BenchmarkId::new("backward", n), &n, |b, _| {
            b.iter(|| cnn::backward(&arch, &params, &tape, &probe))
        });
    }
    group.finish();
}

criterion_group!(benches, network);
criterion_main!(benches);
