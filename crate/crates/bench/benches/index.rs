use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use pgmpp::{fit_keys, generate_synthetic, generate_workload, Distribution, PgmIndex, WorkloadKind};

const N: usize = 1_000_000;

fn build(c: &mut Criterion) {
    let keys = generate_synthetic(Distribution::uniform(0, 1 << 48), N, 1).unwrap().keys;
    let mut g = c.benchmark_group("fit");
    g.throughput(Throughput::Elements(N as u64));
    g.sample_size(10);
    for eps in [8u64, 64, 512] {
        g.bench_with_input(BenchmarkId::from_parameter(eps), &eps, |b, &e| {
            b.iter(|| fit_keys(black_box(&keys), e).unwrap().len())
        });
    }
    g.finish();
}

fn lookup(c: &mut Criterion) {
    let keys: Arc<[u64]> = generate_synthetic(Distribution::lognormal(), N, 2).unwrap().keys.into();
    let qs = generate_workload(&keys, WorkloadKind::Uniform, 5_000, 3).unwrap().queries;
    let mut g = c.benchmark_group("lookup");
    g.throughput(Throughput::Elements(qs.len() as u64));
    for (ei, el) in [(4u64, 16u64), (16, 64), (64, 256)] {
        let idx = PgmIndex::build(keys.clone(), ei, el).unwrap();
        let id = format!("{ei}/{el}");
        g.bench_function(BenchmarkId::new("hybrid", &id), |b| {
            b.iter(|| qs.iter().fold(0usize, |a, &q| a.wrapping_add(idx.lookup(q))))
        });
        g.bench_function(BenchmarkId::new("branchy", &id), |b| {
            b.iter(|| qs.iter().fold(0usize, |a, &q| a.wrapping_add(idx.lookup_branchy(q))))
        });
    }
    g.finish();
}

criterion_group!(benches, build, lookup);
criterion_main!(benches);
