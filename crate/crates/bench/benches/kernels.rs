use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sqlossflow_core::data::{generate, SyntheticKind, SyntheticSpec};
use sqlossflow_core::flow::{step, FlowConfig, FlowState, Integrator};
use sqlossflow_core::net::{decompose, forward, grad_f_v};
use sqlossflow_core::sgd::{init_network, sgd_step, Normalize, TrainConfig, TrainState};
use sqlossflow_core::{Dataset, NormMode};

fn data(n: usize) -> Dataset {
    generate(&SyntheticSpec {
        n_samples: n,
        raw_dim: 10,
        kind: SyntheticKind::MarginSeparable,
        gap: 0.2,
        seed: 1,
        val_fraction: 0.0,
    })
    .unwrap()
    .train
}

fn widths(depth: usize) -> Vec<usize> {
    let mut w = vec![11];
    w.extend(std::iter::repeat_n(32, depth - 1));
    w.push(1);
    w
}

fn net_kernels(c: &mut Criterion) {
    let x = data(2).inputs()[0].clone();
    let mut group = c.benchmark_group("net");
    for depth in [1, 2, 4] {
        let params = init_network(&widths(depth), 1.0, 0).unwrap();
        let nnet = decompose(&params, NormMode::Matrix).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", depth), &depth, |b, _| {
            b.iter(|| forward(black_box(&params), black_box(&x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("grad_f_v", depth), &depth, |b, _| {
            b.iter(|| grad_f_v(black_box(&nnet), black_box(&x)).unwrap())
        });
    }
    group.finish();
}

fn flow_step(c: &mut Criterion) {
    let data = data(200);
    let mut group = c.benchmark_group("flow_step");
    for integrator in [Integrator::EulerProject, Integrator::Rk4Project] {
        let nnet = decompose(&init_network(&widths(3), 1.0, 0).unwrap(), NormMode::Matrix).unwrap();
        let state = FlowState::new(nnet.with_rho(1.0), &data).unwrap();
        let cfg = FlowConfig {
            integrator,
            ..FlowConfig::default()
        };
        group.bench_function(format!("{integrator:?}"), |b| {
            b.iter(|| step(black_box(&state), &data, &cfg).unwrap())
        });
    }
    group.finish();
}

fn sgd(c: &mut Criterion) {
    let data = data(200);
    let batch: Vec<usize> = (0..32).collect();
    let mut group = c.benchmark_group("sgd_step");
    for normalize in [Normalize::None, Normalize::Matrix, Normalize::Row] {
        let cfg = TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            epochs: 1,
            weight_decay: 0.01,
            normalize,
            init_frobenius: 1.0,
            seed: 0,
            trace_stride: 1,
        };
        let start = TrainState::new(init_network(&widths(4), 1.0, 0).unwrap(), 0);
        group.bench_function(format!("{normalize:?}"), |b| {
            b.iter_batched(
                || start.clone(),
                |mut s| sgd_step(&mut s, &data, &batch, &cfg).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, net_kernels, flow_step, sgd);
criterion_main!(benches);
