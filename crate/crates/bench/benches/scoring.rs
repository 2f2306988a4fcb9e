use biasunlearn::scoring::sequence_logprob;
use biasunlearn::{stereoset_eval, PreferenceRule};
use biasunlearn_bench::{corpus, tiny_model};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn scoring(c: &mut Criterion) {
    let corpus = corpus();
    let model = tiny_model(&corpus);
    let inst = &corpus.test[0];
    let seq = model.tokenizer().tokenize(&inst.stereotype, &inst.context).unwrap();

    c.bench_function("sequence_logprob/adapted", |b| {
        b.iter(|| sequence_logprob(&model, black_box(&seq), true).unwrap())
    });
    c.bench_function("sequence_logprob/reference", |b| {
        b.iter(|| sequence_logprob(&model, black_box(&seq), false).unwrap())
    });

    let rule = PreferenceRule::default();
    let mut group = c.benchmark_group("stereoset_eval");
    group.sample_size(20);
    group.bench_function("200_instances", |b| {
        b.iter(|| stereoset_eval(&model, black_box(&corpus.test), &rule).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scoring);
criterion_main!(benches);
