use criterion::{black_box, criterion_group, criterion_main, Criterion};
use driftwatch_core::metrics::{canonicalize_numbers, edit_distance, fisher_exact_2x2, wilson_ci};

fn bench_metrics(c: &mut Criterion) {
    let a = "JPMorgan Chase reported net credit losses of $2.9 billion in 2023 [jpm_2024_10k-0003].".repeat(8);
    let b = "JPMorgan Chase reported net credit losses of $3.1 billion in 2023 [jpm_2024_10k-0004].".repeat(8);
    c.bench_function("edit_distance_700_chars", |bench| bench.iter(|| edit_distance(black_box(&a), black_box(&b))));
    c.bench_function("canonicalize_numbers", |bench| bench.iter(|| canonicalize_numbers(black_box(&a))));
    c.bench_function("wilson_ci_16", |bench| bench.iter(|| wilson_ci(black_box(9), 16, 0.95)));
    c.bench_function("fisher_exact_16x16", |bench| bench.iter(|| fisher_exact_2x2(black_box(16), 0, 9, 7)));
    c.bench_function("fisher_exact_500x500", |bench| bench.iter(|| fisher_exact_2x2(black_box(480), 20, 300, 200)));
}

criterion_group!(benches, bench_metrics);
criterion_main!(benches);
