use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use foctta_bench::{input_batch, random_tensor, reference_model};
use foctta_core::engine::ops;
use foctta_core::engine::tape::{analyze_retention, ForwardOptions, LossGrad};
use foctta_core::memory::predict_cost;
use foctta_core::{BnMode, Precision, Tensor, TrainableSet};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for (cin, cout, side) in [(1, 16, 16), (16, 32, 8), (32, 64, 4)] {
        let x = random_tensor(&[32, cin, side, side], 1);
        let w = random_tensor(&[cout, cin, 3, 3], 2);
        let b = Tensor::zeros(&[cout]);
        let y = ops::conv2d_forward(&x, &w, &b, 1).unwrap();
        let id = format!("{cin}x{side}x{side}->{cout}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &(), |bn, _| {
            bn.iter(|| ops::conv2d_forward(black_box(&x), &w, &b, 1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward-params", &id), &(), |bn, _| {
            bn.iter(|| ops::conv2d_backward_params(black_box(&x), w.shape(), &y, 1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward-input", &id), &(), |bn, _| {
            bn.iter(|| ops::conv2d_backward_input(x.shape(), &w, black_box(&y), 1).unwrap())
        });
    }
    g.finish();
}

fn adaptation_step(c: &mut Criterion) {
    let model = reference_model();
    let plans: [(&str, TrainableSet); 3] = [
        ("L1", [model.representation_layers()[0]].into()),
        ("all-bn", model.bn_layers().into_iter().collect()),
        ("full", model.all_layers()),
    ];
    let mut g = c.benchmark_group("forward-backward");
    for b in [4, 64] {
        let x = input_batch(&model, b);
        for (name, t) in &plans {
            g.bench_with_input(BenchmarkId::new(*name, b), &b, |bn, _| {
                bn.iter(|| {
                    let out = model.forward(black_box(&x), t, &ForwardOptions::new(BnMode::UseBatchStats)).unwrap();
                    let seed = LossGrad::new(0.0, Tensor::full(out.output.shape(), 0.1));
                    out.tape.backward(model.graph(), &seed).unwrap()
                })
            });
        }
    }
    g.finish();
}

fn accounting(c: &mut Criterion) {
    let model = reference_model();
    let all = model.all_layers();
    c.bench_function("predict_cost/full/b64", |bn| {
        bn.iter(|| predict_cost(&model, black_box(&all), 64, Precision::F32).unwrap())
    });
    c.bench_function("analyze_retention/full", |bn| {
        bn.iter(|| analyze_retention(model.graph(), black_box(&all), BnMode::UseBatchStats).unwrap())
    });
}

criterion_group!(benches, conv, adaptation_step, accounting);
criterion_main!(benches);
