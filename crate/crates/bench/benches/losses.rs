use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rankforge_bench::batch;
use rankforge_core::losses::{joint_loss, s_ndcg_loss, triplet_loss};
use rankforge_core::SmoothConfig;

fn bench_losses(c: &mut Criterion) {
    let cfg = SmoothConfig::default();
    let mut group = c.benchmark_group("loss");
    for n in [32usize, 128] {
        let (s, r) = batch(n, 7);
        group.bench_with_input(BenchmarkId::new("triplet", n), &n, |b, _| {
            b.iter(|| triplet_loss(&s, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sndcg", n), &n, |b, _| {
            b.iter(|| s_ndcg_loss(&s, &r, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("joint", n), &n, |b, _| {
            b.iter(|| joint_loss(&s, &r, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_losses);
criterion_main!(benches);
