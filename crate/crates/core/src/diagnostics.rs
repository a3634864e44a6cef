//! Measurements taken along flow and SGD runs, and on saved networks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::lagrange_nu;
use crate::net::{backprop, constraint_gaps, decompose, NetworkParams, NormMode, NormalizedNet};
use crate::numerics::{dot, Matrix, Vector};

/// One recorded point of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Flow time, or SGD step count.
    pub t: f64,
    pub rho: f64,
    pub nu: f64,
    /// `Σ_n (ρ f_n − y_n)²` over the training set.
    pub loss: f64,
    pub train_accuracy: f64,
    pub mean_abs_f: f64,
    pub min_margin: f64,
    pub mean_margin: f64,
    /// `max_n |ρ f_n − y_n|`.
    pub max_interp_residual: f64,
    pub aggregate_residuals: Vec<f64>,
    pub sample_residuals: Vec<f64>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    fn depth(&self) -> usize {
        self.rows.first().map_or(0, |r| r.aggregate_residuals.len())
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = [
            "t",
            "rho",
            "nu",
            "loss",
            "train_accuracy",
            "mean_abs_f",
            "min_margin",
            "mean_margin",
            "max_interp_residual",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let depth = self.depth();
        cols.extend((1..=depth).map(|k| format!("agg_residual_{k}")));
        cols.extend((1..=depth).map(|k| format!("sample_residual_{k}")));
        cols.push("val_loss".into());
        cols.push("val_accuracy".into());
        cols.join(",")
    }

    /// Header plus one line per row; reals carry 17 significant digits and
    /// missing validation columns are left empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.csv_header())?;
        for r in &self.rows {
            let mut cells: Vec<String> = [
                r.t,
                r.rho,
                r.nu,
                r.loss,
                r.train_accuracy,
                r.mean_abs_f,
                r.min_margin,
                r.mean_margin,
                r.max_interp_residual,
            ]
            .iter()
            .map(|&v| fmt17(v))
            .collect();
            cells.extend(r.aggregate_residuals.iter().map(|&v| fmt17(v)));
            cells.extend(r.sample_residuals.iter().map(|&v| fmt17(v)));
            cells.push(r.val_loss.map(fmt17).unwrap_or_default());
            cells.push(r.val_accuracy.map(fmt17).unwrap_or_default());
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Per-layer constraint residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    /// `‖Σ_n (ρ f_n − y_n)(∂f_n/∂V_k − V_k f_n)‖_F`: vanishes at critical points of the flow.
    pub aggregate: Vec<f64>,
    /// `mean_n ‖V_k f_n − ∂f_n/∂V_k‖_F / (1 + |f_n|)`: vanishes where the
    /// constraint holds sample by sample.
    pub per_sample: Vec<f64>,
}

struct SampleStats {
    f: Vector,
    residuals: ConstraintResiduals,
}

fn sample_stats(nnet: &NormalizedNet, data: &Dataset) -> Result<SampleStats> {
    if let Some(d) = data.dim() {
        if d != nnet.input_dim() {
            return Err(Error::Shape {
                op: "diagnostics",
                left: nnet.layers()[0].shape(),
                right: (d, 1),
            });
        }
    }
    let layers = nnet.layers();
    let rho = nnet.rho();
    let mut aggregate: Vec<Matrix> = layers.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect();
    let mut per_sample = vec![0.0; layers.len()];
    let mut f = Vec::with_capacity(data.len());
    for (x, y) in data.iter() {
        let (fx, grads) = backprop(layers, x);
        let err = rho * fx - y;
        for (k, gap) in constraint_gaps(layers, fx, &grads).into_iter().enumerate() {
            // gap = V_k f − ∂f/∂V_k
            aggregate[k].axpy(-err, &gap);
            per_sample[k] += gap.frobenius_norm() / (1.0 + fx.abs());
        }
        f.push(fx);
    }
    if !data.is_empty() {
        per_sample.iter_mut().for_each(|v| *v /= data.len() as f64);
    }
    Ok(SampleStats {
        f,
        residuals: ConstraintResiduals {
            aggregate: aggregate.iter().map(Matrix::frobenius_norm).collect(),
            per_sample,
        },
    })
}

pub fn constraint_residuals(nnet: &NormalizedNet, data: &Dataset) -> Result<ConstraintResiduals> {
    Ok(sample_stats(nnet, data)?.residuals)
}

fn loss_and_accuracy(rho: f64, f: &[f64], y: &[f64]) -> (f64, f64) {
    let loss = f.iter().zip(y).map(|(fi, yi)| (rho * fi - yi).powi(2)).sum();
    let correct = f.iter().zip(y).filter(|(fi, yi)| *fi * *yi > 0.0).count();
    (loss, correct as f64 / y.len().max(1) as f64)
}

/// Computes every trace column for a normalized network.
pub fn record(nnet: &NormalizedNet, data: &Dataset, val: Option<&Dataset>, t: f64) -> Result<TraceRow> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot record metrics on an empty training set".into()));
    }
    let stats = sample_stats(nnet, data)?;
    let rho = nnet.rho();
    let y = data.labels();
    let f = &stats.f;
    let (loss, train_accuracy) = loss_and_accuracy(rho, f, y);
    let margins: Vec<f64> = f.iter().zip(y).map(|(fi, yi)| fi * yi).collect();
    let n = margins.len() as f64;
    let (val_loss, val_accuracy) = match val {
        Some(v) if !v.is_empty() => {
            let fv = nnet.outputs(v)?;
            let (l, a) = loss_and_accuracy(rho, &fv, v.labels());
            (Some(l), Some(a))
        }
        _ => (None, None),
    };
    Ok(TraceRow {
        t,
        rho,
        nu: lagrange_nu(rho, f, y),
        loss,
        train_accuracy,
        mean_abs_f: f.iter().map(|v| v.abs()).sum::<f64>() / n,
        min_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        mean_margin: margins.iter().sum::<f64>() / n,
        max_interp_residual: f
            .iter()
            .zip(y)
            .map(|(fi, yi)| (rho * fi - yi).abs())
            .fold(0.0, f64::max),
        aggregate_residuals: stats.residuals.aggregate,
        sample_residuals: stats.residuals.per_sample,
        val_loss,
        val_accuracy,
    })
}

/// [`record`] for raw weights, via the matrix-mode split `g = ρ f`.
pub fn record_params(net: &NetworkParams, data: &Dataset, val: Option<&Dataset>, t: f64) -> Result<TraceRow> {
    record(&decompose(net, NormMode::Matrix)?, data, val, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    /// `‖V Vᵀ V − V‖_F`.
    pub partial_isometry_defect: f64,
    /// `‖G − I/n‖_F` with `G` the smaller Gram matrix (`V Vᵀ` when rows ≤
    /// cols, else `Vᵀ V`) and `n` its size. Zero exactly for matrices whose
    /// rows (or columns) are orthonormal up to a common scale `1/√n`.
    pub scaled_orthogonality_defect: f64,
}

pub fn projection_orthogonality_probe(nnet: &NormalizedNet) -> Vec<LayerProbe> {
    nnet.layers().iter().map(probe_layer).collect()
}

fn probe_layer(v: &Matrix) -> LayerProbe {
    let vt = v.transpose();
    let vvt = v.matmul(&vt).expect("shapes chain");
    let viso = vvt.matmul(v).expect("shapes chain");
    let partial_isometry_defect = viso.sub(v).expect("same shape").frobenius_norm();
    let gram = if v.rows() <= v.cols() {
        vvt
    } else {
        vt.matmul(v).expect("shapes chain")
    };
    let n = gram.rows();
    let target = Matrix::identity(n).scaled(1.0 / n as f64);
    LayerProbe {
        partial_isometry_defect,
        scaled_orthogonality_defect: gram.sub(&target).expect("same shape").frobenius_norm(),
    }
}

/// Neural Collapse statistics for binary classification. Class weights are
/// equal throughout; see [`nc_metrics`] for the exact definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub nc1: f64,
    pub nc2_angle_dev: f64,
    pub nc2_norm_dev: f64,
    pub nc3: f64,
    pub nc4: f64,
}

fn mean_of(rows: &[&Vector]) -> Vector {
    // shifted mean: exact when all rows coincide
    let first = rows[0];
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        for ((a, v), f) in acc.iter_mut().zip(r.iter()).zip(first) {
            *a += v - f;
        }
    }
    let n = rows.len() as f64;
    first.iter().zip(acc).map(|(f, a)| f + a / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// * `nc1 = tr(Σ_W) / tr(Σ_B)` with `Σ_W` the class-averaged within-class
///   covariance and `Σ_B` the covariance of class means about their average.
/// * `nc2_angle_dev = max |cos(μ_i − μ_G, μ_j − μ_G) + 1/(C−1)|` over class pairs.
/// * `nc2_norm_dev = max_c |‖μ_c − μ_G‖ − m| / m`, `m` the mean centered norm.
/// * `nc3 = 1 − cos(w, μ_+ − μ_−)` for the classifier row `w`.
/// * `nc4`: fraction of samples where `sign(w·h)` (non-positive → −1)
///   disagrees with the nearest class mean.
pub fn nc_metrics(features: &[Vector], labels: &[f64], classifier: &Matrix) -> Result<NcReport> {
    if features.len() != labels.len() {
        return Err(Error::Dataset(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let p = features.first().map_or(0, Vec::len);
    if classifier.rows() != 1 || classifier.cols() != p {
        return Err(Error::Shape {
            op: "nc_metrics",
            left: classifier.shape(),
            right: (1, p),
        });
    }
    if features.iter().any(|h| h.len() != p) {
        return Err(Error::Dataset("feature rows differ in length".into()));
    }
    let mut classes: BTreeMap<i8, Vec<&Vector>> = BTreeMap::new();
    for (h, &y) in features.iter().zip(labels) {
        let key = if y > 0.0 { 1 } else { -1 };
        classes.entry(key).or_default().push(h);
    }
    for key in [-1i8, 1] {
        if !classes.contains_key(&key) {
            return Err(Error::Dataset(format!("class {key:+} is absent")));
        }
    }
    let c = classes.len() as f64;
    let means: BTreeMap<i8, Vector> = classes.iter().map(|(&k, rows)| (k, mean_of(rows))).collect();
    let mean_refs: Vec<&Vector> = means.values().collect();
    let global = mean_of(&mean_refs);

    let within: f64 = classes
        .iter()
        .map(|(k, rows)| {
            let mu = &means[k];
            rows.iter().map(|h| sq_dist(h, mu)).sum::<f64>() / rows.len() as f64
        })
        .sum::<f64>()
        / c;
    let centered: Vec<Vector> = means
        .values()
        .map(|mu| mu.iter().zip(&global).map(|(a, b)| a - b).collect())
        .collect();
    let between: f64 = centered.iter().map(|v| dot(v, v)).sum::<f64>() / c;
    if between == 0.0 {
        return Err(Error::Dataset("class means coincide; NC1 undefined".into()));
    }

    let target = -1.0 / (c - 1.0);
    let mut nc2_angle_dev: f64 = 0.0;
    for i in 0..centered.len() {
        for j in i + 1..centered.len() {
            nc2_angle_dev = nc2_angle_dev.max((cosine(&centered[i], &centered[j]) - target).abs());
        }
    }
    let norms: Vec<f64> = centered.iter().map(|v| dot(v, v).sqrt()).collect();
    let mean_norm = norms.iter().sum::<f64>() / c;
    let nc2_norm_dev = norms
        .iter()
        .map(|n| (n - mean_norm).abs() / mean_norm)
        .fold(0.0, f64::max);

    let w = classifier.row(0);
    let diff: Vector = means[&1].iter().zip(&means[&-1]).map(|(a, b)| a - b).collect();
    let nc3 = 1.0 - cosine(w, &diff);

    let disagree = features
        .iter()
        .filter(|h| {
            let net = dot(w, h) > 0.0;
            let ncc = sq_dist(h, &means[&1]) < sq_dist(h, &means[&-1]);
            net != ncc
        })
        .count();

    Ok(NcReport {
        nc1: within / between,
        nc2_angle_dev,
        nc2_norm_dev,
        nc3,
        nc4: disagree as f64 / features.len() as f64,
    })
}

/// Penultimate features and the last-layer classifier of a network.
pub fn nc_report_for(nnet: &NormalizedNet, data: &Dataset) -> Result<NcReport> {
    let feats = data
        .inputs()
        .iter()
        .map(|x| nnet.penultimate(x))
        .collect::<Result<Vec<_>>>()?;
    nc_metrics(&feats, data.labels(), nnet.layers().last().expect("non-empty"))
}

/// End-of-run numbers for one member of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub lambda: f64,
    pub init: f64,
    pub seed: u64,
    pub final_rho: f64,
    pub min_margin: f64,
    pub mean_margin: f64,
    pub max_interp_residual: f64,
    pub val_error: Option<f64>,
}

impl RunSummary {
    pub fn from_trace(
        run_id: impl Into<String>,
        lambda: f64,
        init: f64,
        seed: u64,
        trace: &MetricTrace,
    ) -> Option<Self> {
        let last = trace.last()?;
        Some(Self {
            run_id: run_id.into(),
            lambda,
            init,
            seed,
            final_rho: last.rho,
            min_margin: last.min_margin,
            mean_margin: last.mean_margin,
            max_interp_residual: last.max_interp_residual,
            val_error: last.val_accuracy.map(|a| 1.0 - a),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub near_interpolating: bool,
    /// `|min_margin − 1/ρ|`, reported for near-interpolating runs.
    pub margin_duality_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<RunRecord>,
    pub interp_tolerance: f64,
    /// Whether `|min_margin − 1/ρ| < 1e-5` on every near-interpolating run.
    pub margin_duality_holds: Option<bool>,
    /// Among near-interpolating runs sorted by `ρ`, min margins strictly decrease.
    pub margins_ordered_by_inverse_rho: Option<bool>,
    /// Same ordering test on the mean margin `Σ y_n f_n / N`.
    pub mean_margins_ordered_by_inverse_rho: Option<bool>,
    /// Within every (init, seed) group with at least two λ values, final `ρ`
    /// strictly decreases as λ grows.
    pub rho_decreasing_in_lambda: Option<bool>,
    /// Spearman rank correlation between final `ρ` and validation error.
    pub spearman_rho_val_error: Option<f64>,
}

pub const MARGIN_DUALITY_TOL: f64 = 1e-5;

pub fn sweep_compare(runs: &[RunSummary], interp_tol: f64) -> SweepReport {
    let records: Vec<RunRecord> = runs
        .iter()
        .map(|s| {
            let near = s.max_interp_residual < interp_tol && s.final_rho > 0.0;
            RunRecord {
                summary: s.clone(),
                near_interpolating: near,
                margin_duality_error: near.then(|| (s.min_margin - 1.0 / s.final_rho).abs()),
            }
        })
        .collect();

    let near: Vec<&RunSummary> = records
        .iter()
        .filter(|r| r.near_interpolating)
        .map(|r| &r.summary)
        .collect();
    let margin_duality_holds = (!near.is_empty()).then(|| {
        records
            .iter()
            .filter_map(|r| r.margin_duality_error)
            .all(|e| e < MARGIN_DUALITY_TOL)
    });
    let mut by_rho = near.clone();
    by_rho.sort_by(|a, b| a.final_rho.total_cmp(&b.final_rho));
    let ordered =
        |key: fn(&RunSummary) -> f64| (by_rho.len() >= 2).then(|| by_rho.windows(2).all(|w| key(w[1]) < key(w[0])));
    let margins_ordered_by_inverse_rho = ordered(|s| s.min_margin);
    let mean_margins_ordered_by_inverse_rho = ordered(|s| s.mean_margin);

    let mut groups: BTreeMap<(u64, u64), Vec<&RunSummary>> = BTreeMap::new();
    for s in runs {
        groups.entry((s.init.to_bits(), s.seed)).or_default().push(s);
    }
    let mut any_group = false;
    let mut decreasing = true;
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        members.dedup_by(|a, b| a.lambda == b.lambda);
        if members.len() >= 2 {
            any_group = true;
            decreasing &= members.windows(2).all(|w| w[1].final_rho < w[0].final_rho);
        }
    }

    let (rhos, errs): (Vec<f64>, Vec<f64>) = runs
        .iter()
        .filter_map(|s| s.val_error.map(|e| (s.final_rho, e)))
        .unzip();

    SweepReport {
        runs: records,
        interp_tolerance: interp_tol,
        margin_duality_holds,
        margins_ordered_by_inverse_rho,
        mean_margins_ordered_by_inverse_rho,
        rho_decreasing_in_lambda: any_group.then_some(decreasing),
        spearman_rho_val_error: spearman(&rhos, &errs),
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` for fewer
/// than two points or a constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}
