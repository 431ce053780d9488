use criterion::{criterion_group, criterion_main, Criterion};
use orat_bench::{mnist_batch, mnist_like_dataset, mnist_mlp};
use orat_core::attacks::pgd;
use orat_core::rng::seeded;
use orat_core::trainer::{batch_update, train, StepSettings, Weighting};
use orat_core::{AttackConfig, DualVars, OratConfig, RankRange, Sgd};
use std::hint::black_box;

fn attacks(c: &mut Criterion) {
    let model = mnist_mlp(0);
    let (x, y) = mnist_batch(128, 1);
    let cfg = AttackConfig::pgd(0.1, 10);
    c.bench_function("pgd10/784-128-10/batch128", |b| {
        let mut rng = seeded(2);
        b.iter(|| pgd(&model, black_box(&x), &y, &cfg, &mut rng).unwrap())
    });
}

fn steps(c: &mut Criterion) {
    let (x, y) = mnist_batch(128, 3);
    let settings = StepSettings {
        range: RankRange::new(120, 12, 128).unwrap(),
        weighting: Weighting::RankedRange,
        lr: 0.01,
        freeze_duals: false,
        dual_clamp: None,
    };
    c.bench_function("batch_update/784-128-10/batch128", |b| {
        let mut model = mnist_mlp(4);
        let mut opt = Sgd::new(&model, 0.01, 0.9, 2e-4);
        let mut duals = DualVars::new(0.0, 5.0);
        b.iter(|| batch_update(&mut model, &mut opt, &mut duals, black_box(&x), &y, &settings).unwrap())
    });
}

fn epoch(c: &mut Criterion) {
    let ds = mnist_like_dataset(512, 5);
    let cfg = OratConfig::parse(
        "k = 500\nm = 50\nepsilon = 0.1\nepochs = 1\nbatch_size = 128\nlambda_hat_init = 5\n",
    )
    .unwrap();
    let mut g = c.benchmark_group("epoch");
    g.sample_size(10);
    g.bench_function("orat/pgd10/n512", |b| {
        b.iter(|| train(black_box(&cfg), &ds).unwrap())
    });
    g.finish();
}

criterion_group!(benches, attacks, steps, epoch);
criterion_main!(benches);
