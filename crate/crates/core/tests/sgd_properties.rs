mod common;

use common::*;
use proptest::prelude::*;
use sqlossflow_core::data::{generate, SyntheticKind, SyntheticSpec};
use sqlossflow_core::net::decompose;
use sqlossflow_core::sgd::{effective_lambda, train, Normalize, TrainConfig};
use sqlossflow_core::NormMode;

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_samples: 80,
        raw_dim: 4,
        kind: SyntheticKind::MarginSeparable,
        gap: 0.3,
        seed,
        val_fraction: 0.25,
    }
}

fn cfg(normalize: Normalize, weight_decay: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        momentum: 0.9,
        batch_size: 8,
        epochs: 20,
        weight_decay,
        normalize,
        init_frobenius: 1.0,
        seed,
        trace_stride: 7,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn normalized_layers_stay_on_their_constraint_set(seed in any::<u64>(), row in any::<bool>()) {
        let g = generate(&spec(seed)).unwrap();
        let mode = if row { Normalize::Row } else { Normalize::Matrix };
        let (state, trace) = train(&[5, 8, 8, 1], &g.train, Some(&g.val), &cfg(mode, 0.01, seed)).unwrap();
        let layers = state.net.layers();
        for w in &layers[..layers.len() - 1] {
            if row {
                for n in w.row_norms() {
                    prop_assert!((n - 1.0).abs() < 1e-12);
                }
            } else {
                prop_assert!((w.frobenius_norm() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(trace.rows.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn identical_inputs_give_identical_traces(seed in any::<u64>()) {
        let g = generate(&spec(seed)).unwrap();
        let c = cfg(Normalize::None, 0.0, seed);
        let (_, a) = train(&[5, 6, 1], &g.train, Some(&g.val), &c).unwrap();
        let (_, b) = train(&[5, 6, 1], &g.train, Some(&g.val), &c).unwrap();
        prop_assert_eq!(a.to_csv_string(), b.to_csv_string());
    }
}

#[test]
fn weight_decay_sets_the_last_layer_scale() {
    let g = generate(&spec(3)).unwrap();
    let c = TrainConfig {
        epochs: 400,
        ..cfg(Normalize::Matrix, 0.01, 3)
    };
    let (state, _) = train(&[5, 8, 8, 1], &g.train, None, &c).unwrap();
    let nnet = decompose(&state.net, NormMode::Matrix).unwrap();
    let f = nnet.outputs(&g.train).unwrap();
    let y = g.train.labels();
    let lambda = effective_lambda(c.weight_decay, g.train.len(), c.batch_size);
    let sum_fy: f64 = f.iter().zip(y).map(|(a, b)| a * b).sum();
    let sum_ff: f64 = f.iter().map(|v| v * v).sum();
    let rho = nnet.rho();
    let residual = (rho - sum_fy / (lambda + sum_ff)).abs() / rho;
    assert!(residual < 0.1, "residual {residual}");
}

#[test]
fn effective_lambda_counts_batches_per_epoch() {
    assert_eq!(effective_lambda(0.01, 500, 32), 0.16);
    assert_eq!(effective_lambda(0.5, 10, 10), 0.5);
    assert_eq!(effective_lambda(0.0, 7, 2), 0.0);
}

#[test]
fn single_sample_single_layer_interpolates() {
    let mut r = rng(8);
    let data = random_dataset(1, 3, &mut r);
    let c = TrainConfig {
        lr: 0.1,
        momentum: 0.0,
        batch_size: 1,
        epochs: 500,
        ..cfg(Normalize::None, 0.0, 1)
    };
    let (state, trace) = train(&[4, 1], &data, None, &c).unwrap();
    let g = state.net.forward(&data.inputs()[0]).unwrap();
    assert!((g - data.labels()[0]).abs() < 1e-12);
    let last = trace.last().unwrap();
    assert!((last.min_margin - 1.0 / last.rho).abs() < 1e-10);
}

fn planar() -> sqlossflow_core::Dataset {
    let spec = SyntheticSpec {
        n_samples: 100,
        raw_dim: 2,
        kind: SyntheticKind::MarginSeparable,
        gap: 0.2,
        seed: 3,
        val_fraction: 0.0,
    };
    generate(&spec).unwrap().train
}

fn regime_run(normalize: Normalize, weight_decay: f64, lr: f64, init: f64) -> (f64, f64) {
    let c = TrainConfig {
        lr,
        batch_size: 16,
        epochs: 1000,
        init_frobenius: init,
        seed: 1,
        trace_stride: 100_000,
        ..cfg(normalize, weight_decay, 1)
    };
    let (_, trace) = train(&[3, 16, 16, 1], &planar(), None, &c).unwrap();
    let last = trace.last().unwrap();
    (last.rho, last.min_margin)
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

#[test]
fn normalized_weight_decay_forgets_the_init_scale() {
    let rhos: Vec<f64> = [0.1, 1.0, 5.0]
        .iter()
        .map(|&init| regime_run(Normalize::Matrix, 0.01, 1e-3, init).0)
        .collect();
    let hi = rhos.iter().copied().fold(f64::MIN, f64::max);
    let lo = rhos.iter().copied().fold(f64::MAX, f64::min);
    assert!((hi - lo) / lo < 0.05, "{rhos:?}");
}

#[test]
fn unnormalized_runs_remember_the_init_scale() {
    let (rho_a, margin_a) = regime_run(Normalize::None, 0.0, 1e-6, 5.0);
    let (rho_b, margin_b) = regime_run(Normalize::None, 0.0, 1e-6, 30.0);
    assert!(rel_gap(rho_a, rho_b) > 0.25, "{rho_a} vs {rho_b}");
    assert!(rel_gap(margin_a, margin_b) > 0.25, "{margin_a} vs {margin_b}");
}
