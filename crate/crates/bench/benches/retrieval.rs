use criterion::{black_box, criterion_group, criterion_main, Criterion};
use driftwatch_core::corpus::{index_snippets, retrieve, retrieve_indexed, Corpus};

fn bench_retrieval(c: &mut Criterion) {
    let snippets = Corpus::bundled().default_snippets().expect("bundled corpus chunks");
    let index = index_snippets(&snippets);
    let q = "What were JPMorgan's net credit losses in 2023?";
    c.bench_function("retrieve_k4", |bench| bench.iter(|| retrieve(black_box(q), &snippets, 4)));
    c.bench_function("retrieve_indexed_k4", |bench| bench.iter(|| retrieve_indexed(black_box(q), &index, 4)));
    c.bench_function("chunk_bundled_corpus", |bench| bench.iter(|| Corpus::bundled().default_snippets()));
}

criterion_group!(benches, bench_retrieval);
criterion_main!(benches);
