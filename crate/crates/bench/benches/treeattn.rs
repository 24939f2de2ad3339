use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use treeattn::autodiff::Tape;
use treeattn::encoders::{AttentionMode, Model, ModelConfig};
use treeattn::mtt::{compute_marginals, marginals_on_tape};
use treeattn::trees::chu_liu_edmonds;
use treeattn::verify::random_scores;
use treeattn_bench::{document, pair};

fn marginals(c: &mut Criterion) {
    let mut group = c.benchmark_group("marginals");
    for n in [10, 30, 60] {
        let s = random_scores(n, 3.0, &mut ChaCha8Rng::seed_from_u64(n as u64));
        group.bench_with_input(BenchmarkId::new("forward", n), &s, |b, s| {
            b.iter(|| compute_marginals(black_box(s)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &s, |b, s| {
            b.iter(|| {
                let mut tape = Tape::new();
                let f = tape.param(s.f().clone());
                let root = treeattn::Matrix::row_vector(s.f_root().to_vec()).unwrap();
                let r = tape.param(root);
                let (a, a_root) = marginals_on_tape(&mut tape, f, r).unwrap();
                let sa = tape.sum(a);
                let sr = tape.sum(a_root);
                let loss = tape.add(sa, sr).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let mut group = c.benchmark_group("chu_liu_edmonds");
    for n in [10, 30, 60] {
        let s = random_scores(n, 3.0, &mut ChaCha8Rng::seed_from_u64(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| {
            b.iter(|| chu_liu_edmonds(black_box(s)).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    const VOCAB: usize = 1000;
    let modes = [
        AttentionMode::None,
        AttentionMode::Simple,
        AttentionMode::Structured,
    ];

    let mut group = c.benchmark_group("pair_forward_n30");
    let ex = pair(30, VOCAB, 1);
    for mode in modes {
        let mut cfg = ModelConfig::nli(VOCAB);
        cfg.sentence.mode = mode;
        let model = Model::new(cfg, 1).unwrap().without_dropout();
        group.bench_function(mode.to_string(), |b| {
            b.iter(|| model.predict(black_box(&ex)).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("document_forward_30x10");
    let ex = document(30, 10, VOCAB, 2);
    for mode in modes {
        let mut cfg = ModelConfig::document(VOCAB, 5);
        cfg.sentence.mode = mode;
        cfg.document.mode = mode;
        let model = Model::new(cfg, 1).unwrap().without_dropout();
        group.bench_function(mode.to_string(), |b| {
            b.iter(|| model.predict(black_box(&ex)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, marginals, decoding, forward);
criterion_main!(benches);
