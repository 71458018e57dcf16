use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqseg_core::loss::sequence_set_loss;
use seqseg_core::matching::{hungarian, set_loss};
use seqseg_core::metrics::{ged, wilcoxon_signed_rank};
use seqseg_core::nn::im2col;
use seqseg_core::{BBoxPrompt, BinaryMask, CostMatrix, Model, ModelConfig, ProbMask};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn masks(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<BinaryMask> {
    (0..k)
        .map(|_| BinaryMask::from_fn(n, n, |_, _| rng.random_bool(0.4)).unwrap())
        .collect()
}

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for k in [3, 6, 16, 64] {
        let mut r = rng();
        let cost = CostMatrix::new(Array2::from_shape_fn((k, k), |_| r.random())).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &cost, |b, cost| {
            b.iter(|| hungarian(black_box(cost)))
        });
    }
    group.finish();

    let mut r = rng();
    let preds: Vec<ProbMask> = (0..3)
        .map(|_| ProbMask::new(Array2::from_shape_fn((16, 16), |_| r.random())).unwrap())
        .collect();
    let labels = masks(&mut r, 3, 16);
    c.bench_function("set_loss/k3_16x16", |b| b.iter(|| set_loss(black_box(&preds), &labels).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let mut r = rng();
    let preds = masks(&mut r, 10, 64);
    let labels = masks(&mut r, 3, 64);
    c.bench_function("ged/m10_k3_64x64", |b| b.iter(|| ged(black_box(&preds), &labels).unwrap()));

    for n in [12, 100] {
        let a: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let bv: Vec<f64> = (0..n).map(|_| r.random()).collect();
        c.bench_function(&format!("wilcoxon/n{n}"), |b| {
            b.iter(|| wilcoxon_signed_rank(black_box(&a), &bv).unwrap())
        });
    }
}

fn model(c: &mut Criterion) {
    let mut r = rng();
    let model = Model::new(ModelConfig::default(), &mut r).unwrap();
    let image = Array2::from_shape_fn((64, 64), |_| r.random());
    let bbox = BBoxPrompt::new(10, 12, 40, 44);
    let embedding = model.encode(&image).unwrap();
    let labels = masks(&mut r, 3, model.config.embed_size());

    c.bench_function("encode/64x64", |b| b.iter(|| model.encode(black_box(&image)).unwrap()));
    let mut group = c.benchmark_group("unroll");
    for m in [3, 10] {
        group.bench_with_input(BenchmarkId::new("forward", m), &m, |b, &m| {
            b.iter(|| model.forward(black_box(&embedding), &bbox, m, true).unwrap())
        });
    }
    group.finish();

    let trace = model.forward(&embedding, &bbox, 3, true).unwrap();
    let loss = sequence_set_loss(&trace.logits, &[0, 1, 2], &labels, None).unwrap();
    c.bench_function("unroll/backward/3", |b| {
        b.iter(|| model.backward(black_box(&trace), &loss.grad_logits).unwrap())
    });

    let x = Array3::from_shape_fn((33, 16, 16), |_| r.random::<f64>());
    c.bench_function("im2col/33x16x16", |b| b.iter(|| im2col(black_box(x.view()), 1)));
}

criterion_group!(benches, matching, metrics, model);
criterion_main!(benches);
