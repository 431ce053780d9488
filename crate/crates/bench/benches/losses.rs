use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use orat_bench::losses;
use orat_core::losses::{
    aorr, orat_inner_objective, orat_saddle_value, orat_subgradients, topk_sum_variational,
};
use orat_core::{DualVars, RankRange};
use std::hint::black_box;

fn ranking(c: &mut Criterion) {
    let mut g = c.benchmark_group("ranking");
    for n in [128, 2000] {
        let v = losses(n, 1);
        let range = RankRange::new(n * 9 / 10, n / 10, n).unwrap();
        g.bench_with_input(BenchmarkId::new("aorr", n), &v, |b, v| {
            b.iter(|| aorr(black_box(v), range).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("topk_variational", n), &v, |b, v| {
            b.iter(|| topk_sum_variational(black_box(v), range.k()).unwrap())
        });
    }
    let v = losses(12, 2);
    let range = RankRange::new(9, 2, 12).unwrap();
    g.bench_function("saddle_value/12", |b| {
        b.iter(|| orat_saddle_value(black_box(&v), range).unwrap())
    });
    g.finish();
}

fn dual_step(c: &mut Criterion) {
    let n = 128;
    let v = losses(n, 3);
    let range = RankRange::new(120, 12, n).unwrap();
    let duals = DualVars::new(1.0, 2.5);
    c.bench_function("inner_objective/128", |b| {
        b.iter(|| orat_inner_objective(black_box(&v), range, duals).unwrap())
    });
    c.bench_function("subgradients/128", |b| {
        b.iter(|| {
            v.values()
                .iter()
                .map(|&l| orat_subgradients(l, duals, range).g_lambda)
                .sum::<f64>()
        })
    });
}

criterion_group!(benches, ranking, dual_step);
criterion_main!(benches);
