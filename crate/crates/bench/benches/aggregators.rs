use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedsim_bench::random_round;
use fedsim_core::aggregators::{
    agg_fedavg, agg_fedcpa, agg_median, agg_multi_krum, agg_rfa, agg_trimmed_mean, FedCpaConfig,
    NormThreshold,
};

fn bench_rules(c: &mut Criterion) {
    let mut group = c.benchmark_group("aggregators");
    for &(n, dim) in &[(10usize, 1_000usize), (20, 10_000)] {
        let set = random_round(n, dim, 42);
        let label = format!("{n}x{dim}");
        group.bench_with_input(BenchmarkId::new("fedavg", &label), &set, |b, s| {
            b.iter(|| agg_fedavg(s, false))
        });
        group.bench_with_input(BenchmarkId::new("median", &label), &set, |b, s| {
            b.iter(|| agg_median(s))
        });
        group.bench_with_input(BenchmarkId::new("trimmed_mean", &label), &set, |b, s| {
            b.iter(|| agg_trimmed_mean(s, 0.2).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("multi_krum", &label), &set, |b, s| {
            b.iter(|| agg_multi_krum(s, 2, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("norm_bound", &label), &set, |b, s| {
            b.iter(|| fedsim_core::aggregators::agg_norm_bound(s, NormThreshold::MedianFactor(2.0)))
        });
        group.bench_with_input(BenchmarkId::new("rfa", &label), &set, |b, s| {
            b.iter(|| agg_rfa(s, 1e-6, 100))
        });
        group.bench_with_input(BenchmarkId::new("fedcpa", &label), &set, |b, s| {
            let cfg = FedCpaConfig::default();
            b.iter(|| agg_fedcpa(s, None, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_rules);
criterion_main!(benches);
