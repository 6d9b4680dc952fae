use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ranger_bench::{random_bank, random_corpus, random_matrix};
use ranger_core::autograd::Graph;
use ranger_core::decode::{generate, DecodeConfig};
use ranger_core::layers::Builder;
use ranger_core::memory::{coarse_recall, retrieve, RegionToken};
use ranger_core::metrics::evaluate_corpus;
use ranger_core::model::Mode;
use ranger_core::moe::{moe_forward, MoeLayer, RoutingNoise};
use ranger_core::params::ParamStore;
use ranger_core::rng::{self, Stream};
use ranger_core::tensor::matmul;
use ranger_core::{Model, ModelConfig};

fn tensors(c: &mut Criterion) {
    let a = random_matrix(1, 128, 64);
    let b = random_matrix(2, 64, 256);
    c.bench_function("matmul 128x64x256", |bench| bench.iter(|| matmul(black_box(&a), black_box(&b))));
}

fn mixture(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(3, "bench.moe");
    let layer = {
        let mut b = Builder::new(&mut store, &mut r);
        MoeLayer::new(&mut b, 64, 256, 4, 2)
    };
    let x = random_matrix(4, 64, 64);
    c.bench_function("moe_forward 64 tokens E=4 k=2", |bench| {
        bench.iter(|| moe_forward(&store, &layer, black_box(&x), &mut RoutingNoise::<Stream>::Off).unwrap())
    });
}

fn retrieval(c: &mut Criterion) {
    let bank = random_bank(5, 2000, 32);
    let q = random_matrix(6, 1, 32);
    c.bench_function("coarse_recall M=2000 K=20", |bench| {
        bench.iter(|| coarse_recall(black_box(q.row(0)), &bank, 20).unwrap())
    });
    let model = Model::new(ModelConfig::desk()).unwrap();
    let regions: Vec<RegionToken> = random_matrix(7, 4, 32)
        .row_iter()
        .map(|r| RegionToken {
            embedding: r.to_vec(),
            members: vec![0],
        })
        .collect();
    c.bench_function("retrieve 4 regions K=20 k=3", |bench| {
        bench.iter(|| retrieve(black_box(&regions), &bank, 20, 3, &model.store, model.reranker()).unwrap())
    });
}

fn model_passes(c: &mut Criterion) {
    let model = Model::new(ModelConfig::desk()).unwrap();
    let bank = random_bank(8, 400, 32);
    let patches = random_matrix(9, 48, 32);
    let report: Vec<u32> = (0..24).map(|i| 4 + (i * 7) % 190).collect();
    c.bench_function("desk forward+backward 48 patches 24 tokens", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let loss = model
                .case_loss(&mut g, &patches, &bank, &report, &mut Mode::train(1))
                .unwrap();
            g.backward(loss.total)
        })
    });
    let cfg = DecodeConfig {
        beam: 3,
        max_steps: 16,
        length_norm: true,
    };
    c.bench_function("desk beam-3 decode 16 steps", |bench| {
        bench.iter(|| generate(&model, &patches, &bank, &cfg).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let cands = random_corpus(10, 50, 30);
    let refs = random_corpus(11, 50, 30);
    c.bench_function("metrics 50 cases x 30 tokens", |bench| {
        bench.iter(|| evaluate_corpus(black_box(&cands), black_box(&refs)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = tensors, mixture, retrieval, model_passes, metrics
}
criterion_main!(benches);
