use bicr_core::losses::{affinity, relation};
use bicr_core::numkernel::Rng;
use criterion::{criterion_group, criterion_main, Criterion};

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let a = rng.normal_matrix(256, 128, 1.0);
    let b = rng.normal_matrix(128, 256, 1.0);
    c.bench_function("matmul_256x128x256", |bench| bench.iter(|| a.matmul(&b).unwrap()));
}

fn relation_terms(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let z = rng.normal_matrix(64, 32, 1.0);
    let t = rng.normal_matrix(64, 32, 1.0);
    let ids: Vec<u32> = (0..64).map(|i| i / 4).collect();
    c.bench_function("affinity_64", |b| b.iter(|| affinity(&z).unwrap()));
    c.bench_function("relation_with_grad_64", |b| b.iter(|| relation(&z, &t, &ids, false).unwrap()));
}

criterion_group!(benches, matmul, relation_terms);
criterion_main!(benches);
