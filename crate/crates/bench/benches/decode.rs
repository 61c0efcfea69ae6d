use std::hint::black_box;

use attrsteer::attrclf::{ClassifierParams, PoolingStrategy};
use attrsteer::guidance::{guided_beam_search, guided_step, GuidanceConfig, HiddenHistory};
use attrsteer::seq2seq::{beam_search, decode_step, encode, encoder_input, BeamConfig, KVCache, ModelConfig, ModelParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const TAG: usize = 2;

fn model() -> ModelParams {
    let cfg = ModelConfig {
        d_model: 32,
        num_heads: 4,
        ffn_dim: 64,
        vocab_size: 80,
        max_positions: 32,
        dropout: 0.0,
        ..Default::default()
    };
    ModelParams::init(&cfg, 7).unwrap()
}

fn source() -> Vec<usize> {
    (0..10).map(|i| 10 + 3 * i).collect()
}

/// Cache and history after decoding a short prefix.
fn prefix(params: &ModelParams, src: &[usize]) -> (KVCache, HiddenHistory, usize) {
    let mut cache = KVCache::new(params, &encode(params, &encoder_input(src)).unwrap()).unwrap();
    let mut history = HiddenHistory::new(params.config().d_model);
    let mut y = TAG;
    for t in 0..6 {
        let out = decode_step(params, y, &cache).unwrap();
        history.push(&out.hidden).unwrap();
        cache = out.cache;
        y = 20 + t;
    }
    (cache, history, y)
}

fn bench_step(c: &mut Criterion) {
    let params = model();
    let clf = ClassifierParams::init(32, 2, PoolingStrategy::Meanpool, 8).unwrap();
    let (cache, history, y) = prefix(&params, &source());
    c.bench_function("decode_step", |b| {
        b.iter(|| decode_step(&params, black_box(y), &cache).unwrap())
    });
    let mut group = c.benchmark_group("guided_step");
    for n in [1usize, 3, 5] {
        let cfg = GuidanceConfig {
            num_iterations: n,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(n), &cfg, |b, cfg| {
            b.iter(|| guided_step(&params, &clf, cfg, &cache, black_box(y), Some(y - 1), &history).unwrap())
        });
    }
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    let params = model();
    let clf = ClassifierParams::init(32, 2, PoolingStrategy::Meanpool, 8).unwrap();
    let src = source();
    let beam = BeamConfig::for_source(src.len(), 32);
    let mut group = c.benchmark_group("search");
    group.sample_size(10);
    group.bench_function("beam", |b| b.iter(|| beam_search(&params, black_box(&src), TAG, &beam).unwrap()));
    group.bench_function("guided_beam", |b| {
        b.iter(|| guided_beam_search(&params, &clf, &GuidanceConfig::default(), black_box(&src), TAG, &beam).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_step, bench_search);
criterion_main!(benches);
