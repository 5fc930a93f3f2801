//! Rayon fan-out against the calling-thread fallback on the hot paths.
//! Build with `--no-default-features` to compile rayon out entirely; both
//! arms then run sequentially.

use std::hint::black_box;

use clapt::corpus::{generate_corpus_with, GeneratorConfig, UntrimmedVideo};
use clapt::evalkit::{
    captions_as_queries, evaluate_grounding, evaluate_tal, FeatureTable, GroundingConfig,
    ProjectionScorer, TalConfig,
};
use clapt::model::{ModelConfig, ModelState};
use clapt::trainer::extract_features;
use clapt::Execution;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn bench(c: &mut Criterion) {
    let cfg = GeneratorConfig {
        n_videos: 100,
        ..GeneratorConfig::default()
    };
    let corpus = generate_corpus_with(&cfg, Execution::Parallel).unwrap();
    let model = ModelState::new(&ModelConfig::desk()).unwrap();
    let features = FeatureTable::new(extract_features(&model, &corpus, Execution::Parallel).unwrap());
    let refs: Vec<&UntrimmedVideo> = corpus.iter().collect();
    let (train, eval) = refs.split_at(80);
    let queries = captions_as_queries(eval);
    let scorer = ProjectionScorer::new(&model);

    let mut g = c.benchmark_group("execution");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("generate", name), |b| {
            b.iter(|| generate_corpus_with(black_box(&cfg), exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("extract", name), |b| {
            b.iter(|| extract_features(black_box(&model), &corpus, exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("eval_tal", name), |b| {
            b.iter(|| evaluate_tal(train, eval, &features, cfg.n_classes, &TalConfig::default(), exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("eval_grounding", name), |b| {
            b.iter(|| evaluate_grounding(&queries, &features, &scorer, &GroundingConfig::default(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
