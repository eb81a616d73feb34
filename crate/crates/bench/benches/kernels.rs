use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use snifr_core::diff_engine::{Graph, Tensor};
use snifr_core::evaluation::auc_one_vs_rest;
use snifr_core::feature_store::synth_complementary;
use snifr_core::model_zoo::Batch;
use snifr_core::{FusionKind, Mode, Model, ModelConfig};

fn pattern(rows: usize, cols: usize, phase: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i as f64) * 0.618 + phase).sin()).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for &(m, k, n) in &[(64, 768, 256), (256, 768, 256)] {
        let a = pattern(m, k, 0.1);
        let b = pattern(k, n, 0.7);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(), |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let va = g.param(&a);
                let vb = g.param(&b);
                let y = g.matmul(va, vb).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(vb).map(|x| x[0]))
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_fwd_bwd");
    for &tokens in &[8usize, 32, 128] {
        let q = pattern(tokens, 256, 0.2);
        let k = pattern(tokens, 256, 0.5);
        let v = pattern(tokens, 256, 0.9);
        group.bench_with_input(BenchmarkId::from_parameter(tokens), &(), |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (vq, vk, vv) = (g.param(&q), g.param(&k), g.param(&v));
                let y = g.attention(vq, vk, vv).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(vq).map(|x| x[0]))
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let data = synth_complementary(64, 0.1, 3).unwrap();
    let batch = Batch::from_records(data.records().iter().take(16)).unwrap();
    let mut group = c.benchmark_group("train_step_batch16");
    group.sample_size(10);
    for kind in [FusionKind::EC, FusionKind::SNIFR] {
        let model = Model::build(ModelConfig::new(kind)).unwrap();
        group.bench_function(kind.name(), |bench| {
            bench.iter(|| black_box(model.loss_and_grads(&batch, Mode::Train, 1, None).unwrap().0))
        });
    }
    group.finish();
}

fn auc(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
    let positive: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
    c.bench_function("auc_10k", |bench| bench.iter(|| black_box(auc_one_vs_rest(&scores, &positive))));
}

criterion_group!(benches, matmul, attention, train_step, auc);
criterion_main!(benches);
