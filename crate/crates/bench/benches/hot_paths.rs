use std::hint::black_box;

use adaptkit_core::data::{synth_bilingual, Batch, SynthSpec};
use adaptkit_core::model::{init_model, Bindings};
use adaptkit_core::peft::{attach, StrategySpec, Variant};
use adaptkit_core::train::clm_loss;
use adaptkit_core::{forward, train_bpe, ModelSpec, Tape, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn matmul(c: &mut Criterion) {
    let (a, b) = (random(&[256, 64], 1), random(&[64, 256], 2));
    c.bench_function("matmul 256x64x256", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(a.clone());
            let y = tape.constant(b.clone());
            black_box(tape.matmul(x, y).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let spec = ModelSpec::toy();
    let base = init_model(&spec).unwrap();
    let seq = tokens(64, spec.vocab, 3);
    c.bench_function("toy forward 64 tokens", |bench| {
        bench.iter(|| black_box(forward(&base, None, black_box(&seq)).unwrap()))
    });

    let state = attach(&base, &StrategySpec::new(Variant::Madx), 0).unwrap();
    let batch = Batch {
        tokens: (0..8).map(|i| tokens(32, spec.vocab, 10 + i)).collect(),
        target: vec![vec![true; 32]; 8],
    };
    c.bench_function("toy madx loss and gradient 8x32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let b = Bindings::bind(&mut tape, [base.tensors(), &state.tensors], &|n| n.starts_with("adapter.")).unwrap();
            let loss = clm_loss(&mut tape, &spec, &b, &batch).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn tokenizer(c: &mut Criterion) {
    let corpus = synth_bilingual(&SynthSpec {
        n_docs: 100,
        ..SynthSpec::default()
    });
    let docs: Vec<&str> = corpus.lang_a.iter().chain(&corpus.lang_b).map(String::as_str).collect();
    c.bench_function("train bpe 200 docs to 512", |bench| {
        bench.iter(|| black_box(train_bpe(&docs, 510, 0).unwrap()))
    });
    let tok = train_bpe(&docs, 510, 0).unwrap().with_specials();
    let text = docs.join("\n");
    c.bench_function("encode 200 docs", |bench| bench.iter(|| black_box(tok.encode(text.as_bytes()))));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, model, tokenizer
}
criterion_main!(benches);
