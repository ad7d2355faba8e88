use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mgrank_bench::{corpus, groups, policy};
use mgrank_core::reward::batch_rewards;
use mgrank_core::thurstone::{comparison_prob, ComparisonConfig};
use mgrank_core::{DomainWeightParams, RewardConfig, WeightParams};
use std::hint::black_box;

fn thurstone(c: &mut Criterion) {
    let cfg = ComparisonConfig::default();
    c.bench_function("comparison_prob", |b| {
        b.iter(|| comparison_prob(black_box(3.25), 0.4, black_box(2.75), 0.3, &cfg))
    });
}

fn batch(c: &mut Criterion) {
    let ds = corpus(64);
    let pol = policy(&ds);
    let cfg = RewardConfig::default();
    let weights = WeightParams::uniform(ds.schema().arity());
    let domain = DomainWeightParams::zeros(ds.domains().iter(), ds.schema().arity());
    let mut group = c.benchmark_group("batch_rewards");
    for b in [8, 32, 64] {
        let gs = groups(&ds, &pol, b, 6);
        let pairs: Vec<_> = ds.records().iter().zip(&gs).collect();
        group.bench_with_input(BenchmarkId::from_parameter(b), &pairs, |bench, pairs| {
            bench.iter(|| batch_rewards(pairs, &cfg, &weights, &domain).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, thurstone, batch);
criterion_main!(benches);
