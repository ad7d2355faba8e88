use criterion::{criterion_group, criterion_main, Criterion};
use mgrank_bench::{corpus, groups, policy};
use mgrank_core::grpo::{compute_advantages, grpo_step, ScoredGroup};
use mgrank_core::simlab::{Trainer, TrainConfig};
use mgrank_core::GrpoConfig;

fn step(c: &mut Criterion) {
    let ds = corpus(64);
    let pol = policy(&ds);
    let cfg = GrpoConfig::default();
    let batch: Vec<ScoredGroup> = groups(&ds, &pol, 8, cfg.group_size)
        .into_iter()
        .map(|group| {
            let rewards: Vec<f64> = (0..group.len()).map(|k| k as f64 / 10.0).collect();
            ScoredGroup {
                advantages: compute_advantages(&rewards, cfg.eps_adv).unwrap(),
                group,
            }
        })
        .collect();
    let old = pol.snapshot();
    c.bench_function("grpo_step_b8_k6", |b| b.iter(|| grpo_step(&pol, &old, &old, &batch, &cfg).unwrap()));
}

fn training(c: &mut Criterion) {
    let ds = corpus(64);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("ten_steps", |b| {
        b.iter(|| {
            let mut t = Trainer::new(&ds, TrainConfig::default()).unwrap();
            t.run_until(10).unwrap();
        })
    });
    group.finish();
}

criterion_group!(benches, step, training);
criterion_main!(benches);
