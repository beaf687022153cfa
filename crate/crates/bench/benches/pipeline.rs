//! Hot-path benchmarks: tape forward/backward, detector loss, decoder step,
//! beam decode, and CIDEr-D scoring.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cgvrg_core::corpus::feature_dim;
use cgvrg_core::decoder::{Captioner, CaptionerDims, MtBlock};
use cgvrg_core::graph::{build_graph, GraphConfig};
use cgvrg_core::metrics::{build_idf, cider_d_sentence};
use cgvrg_core::mil::{build_bags, mil_loss, train_mil, MilModel, MilTrainConfig};
use cgvrg_core::params::Binder;
use cgvrg_core::rng::substream;
use cgvrg_core::tensor::Tape;
use cgvrg_core::toygen::{generate_toy_corpus, ToyParams};
use cgvrg_core::train::train_xe;
use cgvrg_core::train::XeTrainConfig;
use cgvrg_core::vocab::{build_vocabularies, extract_image_triples, VocabConfig, BOS_ID};

fn bench_tape(c: &mut Criterion) {
    let mut rng = substream(1, "bench-tape");
    use rand::Rng;
    let a: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("matmul64_softmax_backward", |bench| {
        bench.iter(|| {
            let tape: Tape<f32> = Tape::new();
            let x = tape.leaf_grad(a.clone(), &[64, 64]);
            let y = tape.leaf(b.clone(), &[64, 64]);
            let loss = x.matmul(y).tanh().softmax(1).sum();
            tape.backward(loss).unwrap();
            black_box(x.grad());
        })
    });
}

fn toy_world() -> (
    Vec<cgvrg_core::ImageRecord>,
    cgvrg_core::Vocabularies,
    MilModel<f32>,
    Vec<cgvrg_core::CgvrgGraph>,
) {
    let corpus = generate_toy_corpus(7, &ToyParams::default()).unwrap();
    let vocab = build_vocabularies(&corpus, &VocabConfig::default()).unwrap();
    let (mil, _) = train_mil(&corpus, &vocab, &MilTrainConfig { epochs: 5, ..Default::default() }).unwrap();
    let cfg = GraphConfig::default();
    let graphs = corpus.iter().map(|i| build_graph(i, &mil, &vocab, &cfg).unwrap()).collect();
    (corpus, vocab, mil, graphs)
}

fn bench_mil_loss(c: &mut Criterion) {
    let (corpus, vocab, mil, _) = toy_world();
    let image = &corpus[0];
    let triples = extract_image_triples(image, &vocab);
    let bags = build_bags(image, &triples, &vocab).unwrap();
    c.bench_function("mil_loss_backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let binder = Binder::trainable(&tape, &mil.params);
            let loss = mil_loss(&tape, &binder, &mil, image, &bags).unwrap();
            tape.backward(loss).unwrap();
            black_box(loss.value());
        })
    });
}

fn trained_captioner() -> (
    Vec<cgvrg_core::ImageRecord>,
    cgvrg_core::Vocabularies,
    Vec<cgvrg_core::CgvrgGraph>,
    Captioner<f32>,
) {
    let (corpus, vocab, _, graphs) = toy_world();
    let mut rng = substream(7, "bench-cap");
    let mut captioner = Captioner::<f32>::new(
        CaptionerDims::default(),
        vocab.num_words(),
        vocab.num_categories(),
        vocab.num_predicates(),
        feature_dim(&corpus),
        MtBlock::Mt1,
        &mut rng,
    )
    .unwrap();
    let cfg = XeTrainConfig { epochs: 5, ..Default::default() };
    train_xe(&mut captioner, &corpus, &graphs, &vocab, &cfg, |_, _, _| Ok(())).unwrap();
    (corpus, vocab, graphs, captioner)
}

fn bench_decoder(c: &mut Criterion) {
    let (corpus, vocab, graphs, captioner) = trained_captioner();
    c.bench_function("decoder_step", |bench| {
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &captioner.params);
        let enc = captioner.encode(&tape, &binder, &vocab, &corpus[0], &graphs[0]).unwrap();
        let state = captioner.init_state(&tape, &binder, &enc);
        bench.iter(|| {
            let out = captioner.step(&tape, &binder, &state, BOS_ID, &enc).unwrap();
            black_box(out.word_dist.to_vec());
        })
    });
    c.bench_function("beam_search_b3", |bench| {
        bench.iter(|| {
            let out = captioner.beam_search(&vocab, &corpus[0], &graphs[0], 3, 28).unwrap();
            black_box(out[0].score);
        })
    });
}

fn bench_cider(c: &mut Criterion) {
    let (corpus, ..) = toy_world();
    let refs: Vec<_> = corpus.iter().map(|i| i.captions.clone()).collect();
    let idf = build_idf(&refs).unwrap();
    let candidate = corpus[3].captions[0].clone();
    c.bench_function("cider_d_sentence", |bench| {
        bench.iter(|| black_box(cider_d_sentence(&candidate, &refs[0], &idf).unwrap()))
    });
}

criterion_group!(benches, bench_tape, bench_mil_loss, bench_decoder, bench_cider);
criterion_main!(benches);
