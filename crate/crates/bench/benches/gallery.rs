use std::time::Duration;

use bicr_bench::Fixture;
use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};

fn maintenance(c: &mut Criterion) {
    let mut group = c.benchmark_group("gallery_maintenance");
    for n in [1_000usize, 10_000] {
        let fx = Fixture::new(n, 0);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("reextract_deep", n), &fx, |b, fx| {
            b.iter(|| fx.embedder.forward(&fx.raw).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("update_all", n), &fx, |b, fx| {
            b.iter_batched(
                || fx.store.clone(),
                |mut s| {
                    s.update_all(&fx.transfer, 0.2, 2).unwrap();
                    s
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let fx = Fixture::new(10_000, 1);
    let q = fx.embedder.forward(&fx.raw).unwrap();
    c.bench_function("rank_query_10k", |b| b.iter(|| fx.store.rank_query(q.row(7)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = maintenance, ranking
}
criterion_main!(benches);
