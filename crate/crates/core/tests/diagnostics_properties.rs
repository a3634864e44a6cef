mod common;

use common::*;
use proptest::prelude::*;
use sqlossflow_core::diagnostics::{constraint_residuals, nc_metrics, record, sweep_compare, RunSummary};
use sqlossflow_core::net::fit_last_layer;
use sqlossflow_core::Matrix;

/// Random orthogonal matrix from Gram–Schmidt on Gaussian columns.
fn random_rotation(p: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < p {
        let mut v = gaussian(&mut r, p);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

fn apply(q: &[Vec<f64>], shift: &[f64], h: &[f64]) -> Vec<f64> {
    q.iter()
        .zip(shift)
        .map(|(row, s)| row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + s)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nc1_is_invariant_under_rigid_motions(seed in any::<u64>(), p in 2usize..6) {
        let mut r = rng(seed);
        let n = 40;
        let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let feats: Vec<Vec<f64>> = labels
            .iter()
            .map(|y| gaussian(&mut r, p).into_iter().enumerate().map(|(j, v)| v + if j == 0 { 2.0 * y } else { 0.0 }).collect())
            .collect();
        let w = Matrix::new(1, p, gaussian(&mut r, p)).unwrap();
        let base = nc_metrics(&feats, &labels, &w).unwrap();
        let q = random_rotation(p, seed ^ 1);
        let shift = gaussian(&mut r, p);
        let moved: Vec<Vec<f64>> = feats.iter().map(|h| apply(&q, &shift, h)).collect();
        let other = nc_metrics(&moved, &labels, &w).unwrap();
        prop_assert!((base.nc1 - other.nc1).abs() <= 1e-10 * base.nc1.max(1.0));
    }

    #[test]
    fn nc4_vanishes_on_collapsed_features(seed in any::<u64>(), p in 1usize..6, sep in 0.01f64..10.0) {
        let mut r = rng(seed);
        let dir = gaussian(&mut r, p);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mu: Vec<f64> = dir.iter().map(|v| sep * v / norm).collect();
        let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
        let labels = vec![1.0, -1.0, 1.0, -1.0, -1.0];
        let feats: Vec<Vec<f64>> = labels.iter().map(|&y| if y > 0.0 { mu.clone() } else { neg.clone() }).collect();
        let w = Matrix::new(1, p, mu.clone()).unwrap();
        let rep = nc_metrics(&feats, &labels, &w).unwrap();
        prop_assert_eq!(rep.nc4, 0.0);
        prop_assert_eq!(rep.nc1, 0.0);
    }
}

#[test]
fn aggregate_residual_is_zero_at_exact_interpolation() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let data = random_dataset(4, 7, &mut r);
        let base = matrix_net(&random_net(&widths(8, 12, 2), seed));
        let Ok(fitted) = fit_last_layer(&base, &data) else {
            continue;
        };
        let res = constraint_residuals(&fitted, &data).unwrap();
        let rho = fitted.rho();
        let f = fitted.outputs(&data).unwrap();
        let exact = f.iter().zip(data.labels()).all(|(fi, y)| rho * fi - y == 0.0);
        if exact {
            assert!(res.aggregate.iter().all(|&a| a == 0.0));
        }
        assert!(res.aggregate.iter().all(|&a| a < 1e-12));
    }
}

#[test]
fn sweep_margins_match_inverse_rho_on_interpolating_runs() {
    let mut summaries = Vec::new();
    for seed in 0..4u64 {
        let mut r = rng(seed);
        let data = random_dataset(5, 8, &mut r);
        let base = matrix_net(&random_net(&widths(9, 10, 2), seed));
        let fitted = fit_last_layer(&base, &data).unwrap();
        let row = record(&fitted, &data, None, 0.0).unwrap();
        let trace = sqlossflow_core::MetricTrace {
            rows: vec![row],
            converged: true,
        };
        summaries.push(RunSummary::from_trace(format!("r{seed}"), 0.0, 1.0, seed, &trace).unwrap());
    }
    let report = sweep_compare(&summaries, 1e-6);
    assert_eq!(report.margin_duality_holds, Some(true));
    for run in &report.runs {
        assert!(run.near_interpolating);
        assert!((run.summary.min_margin - 1.0 / run.summary.final_rho).abs() < 1e-5);
        assert!((run.summary.mean_margin - 1.0 / run.summary.final_rho).abs() < 1e-5);
    }
}
