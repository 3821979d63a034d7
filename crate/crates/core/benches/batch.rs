//! Sequential vs data-parallel execution of the batch paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use semcert::certainty::{Scorer, ScorerConfig};
use semcert::pq::{train_codebook_with, PqConfig};
use semcert::sim::{generate_instance, SimConfig};
use semcert::{build_index, Execution};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch(c: &mut Criterion) {
    let sim = SimConfig { num_wells: 30, docs_per_well: 300, queries_per_well: 10, dim: 64, seed: 1, ..Default::default() };
    let inst = generate_instance(&sim).unwrap();
    let pq = PqConfig { kmeans_iters: 5, ..PqConfig::default_for_dim(64, 1) };
    let cb = train_codebook_with(&inst.corpus, &pq, Execution::Parallel).unwrap();
    let index = build_index(inst.corpus.clone(), None).unwrap();
    let scorer = Scorer::new(&index, &cb, ScorerConfig { calibration_rows: 500, ..Default::default() }).unwrap();

    let mut group = c.benchmark_group("batch_search");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(index.batch_search(&inst.queries, 10, exec).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("assess_batch");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(scorer.assess_batch(&inst.queries, exec).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_codebook");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(train_codebook_with(&inst.corpus, &pq, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
