//! Gradient flow of the square loss on `{ρ ≥ 0} × Π_k S(V_k)`.
//!
//! The objective is
//!
//! ```text
//! L(ρ, V) = Σ_n (ρ f_n − y_n)² + ν Σ_k ‖V_k‖² + λ ρ²
//! ```
//!
//! with `ν` eliminated by the unit-norm constraint. The flow is
//!
//! ```text
//! ρ̇   = −2 [ρ Σ f_n² − Σ f_n y_n] − 2 λ ρ
//! V̇_k = 2 ρ Σ_n (ρ f_n − y_n) (f_n V_k − ∂f_n/∂V_k)
//! ```
//!
//! which is exactly the negative gradient of `L` in each variable. Since `f`
//! is positively 1-homogeneous in every `V_k` separately,
//! `⟨V_k, ∂f/∂V_k⟩_F = f`, so `V̇_k` is tangent to the sphere; we still pass it
//! through a tangent projection because discretization reintroduces drift.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{record, MetricTrace};
use crate::error::{Error, Result};
use crate::net::{backprop, constraint_gaps, NormMode, NormalizedNet};
use crate::numerics::{remove_radial, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Explicit Euler, then renormalize every `V_k`.
    EulerProject,
    /// Classical RK4 on the unconstrained field, renormalizing once per step.
    Rk4Project,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub lambda: f64,
    pub dt: f64,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    pub t_max: f64,
    #[serde(default = "default_tol_equilibrium")]
    pub tol_equilibrium: f64,
    #[serde(default = "default_tol_interpolation")]
    pub tol_interpolation: f64,
    /// Record a trace row every this many steps.
    #[serde(default = "default_trace_stride")]
    pub trace_stride: usize,
}

fn default_integrator() -> Integrator {
    Integrator::EulerProject
}
fn default_tol_equilibrium() -> f64 {
    1e-7
}
fn default_tol_interpolation() -> f64 {
    1e-4
}
fn default_trace_stride() -> usize {
    100
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            dt: 1e-3,
            integrator: default_integrator(),
            t_max: 100.0,
            tol_equilibrium: default_tol_equilibrium(),
            tol_interpolation: default_tol_interpolation(),
            trace_stride: default_trace_stride(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("dt", self.dt)?;
        positive("t_max", self.t_max)?;
        positive("tol_equilibrium", self.tol_equilibrium)?;
        positive("tol_interpolation", self.tol_interpolation)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.trace_stride == 0 {
            return Err(Error::Config("trace_stride must be positive".into()));
        }
        Ok(())
    }
}

/// A point on the flow with its cached outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    net: NormalizedNet,
    f: Vector,
    nu: f64,
    loss: f64,
    /// Number of steps where `ρ` went negative and was clamped to 0.
    pub rho_clamps: usize,
}

impl FlowState {
    pub fn new(net: NormalizedNet, data: &Dataset) -> Result<Self> {
        if net.mode() != NormMode::Matrix {
            return Err(Error::Config("the flow runs on matrix-mode networks".into()));
        }
        let f = net.outputs(data)?;
        Ok(Self::from_parts(0.0, net, f, data, 0))
    }

    fn from_parts(t: f64, net: NormalizedNet, f: Vector, data: &Dataset, rho_clamps: usize) -> Self {
        let rho = net.rho();
        let y = data.labels();
        let loss = f.iter().zip(y).map(|(fi, yi)| (rho * fi - yi).powi(2)).sum();
        Self {
            t,
            nu: lagrange_nu(rho, &f, y),
            net,
            f,
            loss,
            rho_clamps,
        }
    }

    pub fn net(&self) -> &NormalizedNet {
        &self.net
    }

    pub fn rho(&self) -> f64 {
        self.net.rho()
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Constrained objective `Σ (ρ f_n − y_n)² + λ ρ²`.
    pub fn objective(&self, lambda: f64) -> f64 {
        self.loss + lambda * self.rho().powi(2)
    }

    /// The Lagrangian with a given multiplier, evaluated at this state.
    pub fn lagrangian(&self, nu: f64, lambda: f64) -> f64 {
        let sq: f64 = self.net.layers().iter().map(|v| v.frobenius_dot(v)).sum();
        self.loss + nu * sq + lambda * self.rho().powi(2)
    }
}

/// `ν = −Σ_n (ρ² f_n² − ρ y_n f_n)`.
pub fn lagrange_nu(rho: f64, f: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(f.len(), y.len());
    -f.iter()
        .zip(y)
        .map(|(fi, yi)| rho * rho * fi * fi - rho * yi * fi)
        .sum::<f64>()
}

/// `ρ̇ = −2 [ρ Σ f_n² − Σ f_n y_n] − 2 λ ρ`.
pub fn rho_dot(rho: f64, f: &[f64], y: &[f64], lambda: f64) -> f64 {
    debug_assert_eq!(f.len(), y.len());
    let sum_ff: f64 = f.iter().map(|v| v * v).sum();
    let sum_fy: f64 = f.iter().zip(y).map(|(a, b)| a * b).sum();
    -2.0 * (rho * sum_ff - sum_fy) - 2.0 * lambda * rho
}

/// `ρ_eq = Σ y_n f_n / (λ + Σ f_n²)`.
pub fn rho_equilibrium(f: &[f64], y: &[f64], lambda: f64) -> Result<f64> {
    let denom = lambda + f.iter().map(|v| v * v).sum::<f64>();
    if denom <= 0.0 {
        return Err(Error::DegenerateEquilibrium);
    }
    Ok(f.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / denom)
}

/// The vector field at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub rho_dot: f64,
    pub v_dot: Vec<Matrix>,
}

impl FlowField {
    /// `√(ρ̇² + Σ_k ‖V̇_k‖²_F)`.
    pub fn norm(&self) -> f64 {
        (self.rho_dot.powi(2) + self.v_dot.iter().map(|m| m.frobenius_dot(m)).sum::<f64>()).sqrt()
    }
}

/// Evaluates the field at an arbitrary `(ρ, V)`; the `V_k` need not be unit
/// norm (RK4 stages leave the sphere).
fn field_at(rho: f64, layers: &[Matrix], data: &Dataset, lambda: f64) -> (Vector, FlowField) {
    let mut v_dot: Vec<Matrix> = layers.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect();
    let mut f = Vec::with_capacity(data.len());
    for (x, y) in data.iter() {
        let (fx, grads) = backprop(layers, x);
        let coeff = 2.0 * rho * (rho * fx - y);
        if coeff != 0.0 {
            for (acc, gap) in v_dot.iter_mut().zip(constraint_gaps(layers, fx, &grads)) {
                acc.axpy(coeff, &gap);
            }
        }
        f.push(fx);
    }
    let v_dot = v_dot.iter().zip(layers).map(|(d, v)| remove_radial(d, v)).collect();
    let rho_dot = rho_dot(rho, &f, data.labels(), lambda);
    (f, FlowField { rho_dot, v_dot })
}

/// `V̇_k` for every layer (tangent to the sphere).
pub fn v_dot(state: &FlowState, data: &Dataset) -> Vec<Matrix> {
    field_at(state.rho(), state.net.layers(), data, 0.0).1.v_dot
}

pub fn flow_field(state: &FlowState, data: &Dataset, lambda: f64) -> FlowField {
    field_at(state.rho(), state.net.layers(), data, lambda).1
}

fn advance(rho: f64, layers: &[Matrix], field: &FlowField, h: f64) -> (f64, Vec<Matrix>) {
    let layers = layers
        .iter()
        .zip(&field.v_dot)
        .map(|(v, d)| {
            let mut out = v.clone();
            out.axpy(h, d);
            out
        })
        .collect();
    (rho + h * field.rho_dot, layers)
}

fn step_with_field(state: &FlowState, field: &FlowField, data: &Dataset, cfg: &FlowConfig) -> Result<FlowState> {
    let dt = cfg.dt;
    let rho = state.rho();
    let layers = state.net.layers();
    let (mut new_rho, mut new_layers) = match cfg.integrator {
        Integrator::EulerProject => advance(rho, layers, field, dt),
        Integrator::Rk4Project => {
            let k1 = field;
            let (r2, v2) = advance(rho, layers, k1, dt / 2.0);
            let k2 = field_at(r2, &v2, data, cfg.lambda).1;
            let (r3, v3) = advance(rho, layers, &k2, dt / 2.0);
            let k3 = field_at(r3, &v3, data, cfg.lambda).1;
            let (r4, v4) = advance(rho, layers, &k3, dt);
            let k4 = field_at(r4, &v4, data, cfg.lambda).1;
            let combined = FlowField {
                rho_dot: (k1.rho_dot + 2.0 * k2.rho_dot + 2.0 * k3.rho_dot + k4.rho_dot) / 6.0,
                v_dot: (0..layers.len())
                    .map(|k| {
                        let mut m = k1.v_dot[k].clone();
                        m.axpy(2.0, &k2.v_dot[k]);
                        m.axpy(2.0, &k3.v_dot[k]);
                        m.axpy(1.0, &k4.v_dot[k]);
                        m.scaled(1.0 / 6.0)
                    })
                    .collect(),
            };
            advance(rho, layers, &combined, dt)
        }
    };

    if !new_rho.is_finite() || new_layers.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite(format!("flow state after step at t = {}", state.t)));
    }
    let mut clamps = state.rho_clamps;
    if new_rho < 0.0 {
        log::warn!("rho went negative ({new_rho:e}) at t = {}; clamped to 0", state.t + dt);
        new_rho = 0.0;
        clamps += 1;
    }
    for (k, v) in new_layers.iter_mut().enumerate() {
        let n = v.frobenius_norm();
        if n == 0.0 {
            return Err(Error::Layer {
                layer: k + 1,
                reason: "collapsed to zero during the flow".into(),
            });
        }
        if n != 1.0 {
            v.scale_mut(1.0 / n);
        }
    }
    let net = NormalizedNet::new(new_rho, new_layers, NormMode::Matrix)?;
    let f = net.outputs(data)?;
    Ok(FlowState::from_parts(state.t + dt, net, f, data, clamps))
}

/// Advances `(ρ, V)` by `cfg.dt` and renormalizes every `V_k`.
pub fn step(state: &FlowState, data: &Dataset, cfg: &FlowConfig) -> Result<FlowState> {
    let field = flow_field(state, data, cfg.lambda);
    step_with_field(state, &field, data, cfg)
}

/// Steps until the field norm drops below `tol_equilibrium` or `t_max` is
/// passed. Rows are recorded every `trace_stride` steps and at the end.
pub fn integrate(state0: &FlowState, data: &Dataset, cfg: &FlowConfig) -> Result<(FlowState, MetricTrace)> {
    cfg.validate()?;
    let mut state = state0.clone();
    let mut trace = MetricTrace::default();
    let mut steps = 0usize;
    loop {
        let field = flow_field(&state, data, cfg.lambda);
        let converged = field.norm() < cfg.tol_equilibrium;
        let timed_out = state.t >= cfg.t_max;
        if steps.is_multiple_of(cfg.trace_stride) || converged || timed_out {
            trace.rows.push(record(state.net(), data, None, state.t)?);
        }
        if converged {
            trace.converged = true;
            break;
        }
        if timed_out {
            break;
        }
        state = match step_with_field(&state, &field, data, cfg) {
            Ok(s) => s,
            Err(e) => {
                return Err(Error::FlowAborted {
                    t: state.t,
                    reason: e.to_string(),
                    trace: Box::new(trace),
                })
            }
        };
        steps += 1;
    }
    Ok((state, trace))
}

/// Smallest `ρ` on a strictly increasing grid where
/// `Σ y_n f_n − ρ (λ + Σ f_n²)` changes sign, refined by bisection.
/// `f_profile` maps `ρ` to the network outputs at that scale.
pub fn first_critical_rho<F>(f_profile: F, y: &[f64], lambda: f64, rho_grid: &[f64]) -> Option<f64>
where
    F: Fn(f64) -> Vector,
{
    if rho_grid.windows(2).any(|w| w[1] <= w[0]) {
        return None;
    }
    let h = |rho: f64| {
        let f = f_profile(rho);
        let sum_fy: f64 = f.iter().zip(y).map(|(a, b)| a * b).sum();
        let sum_ff: f64 = f.iter().map(|v| v * v).sum();
        sum_fy - rho * (lambda + sum_ff)
    };
    let mut prev = (rho_grid.first().copied()?, 0.0);
    prev.1 = h(prev.0);
    // ρ = 0 solves the equation trivially whenever Σ y f = 0; only positive roots count
    if prev.1 == 0.0 && prev.0 > 0.0 {
        return Some(prev.0);
    }
    for &rho in &rho_grid[1..] {
        let hv = h(rho);
        if hv == 0.0 {
            return Some(rho);
        }
        if prev.1 == 0.0 {
            prev = (rho, hv);
            continue;
        }
        if hv.signum() != prev.1.signum() {
            let (mut lo, mut hlo, mut hi) = (prev.0, prev.1, rho);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let hm = h(mid);
                if hm == 0.0 {
                    return Some(mid);
                }
                if hm.signum() == hlo.signum() {
                    lo = mid;
                    hlo = hm;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = (rho, hv);
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NotInterpolating,
    /// Interpolating and the per-sample constraint holds.
    Regular,
    /// Interpolating, so the flow vanishes, but the constraint fails.
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub verdict: Verdict,
    pub max_interp_residual: f64,
    /// Per layer, `max_n ‖V_k f_n − ∂f_n/∂V_k‖_F`.
    pub constraint_residuals: Vec<f64>,
}

pub fn singularity_probe(state: &FlowState, data: &Dataset, tol_interpolation: f64) -> SingularityReport {
    let layers = state.net.layers();
    let rho = state.rho();
    let mut max_interp: f64 = 0.0;
    let mut residuals = vec![0.0_f64; layers.len()];
    for (x, y) in data.iter() {
        let (fx, grads) = backprop(layers, x);
        max_interp = max_interp.max((rho * fx - y).abs());
        for (r, gap) in residuals.iter_mut().zip(constraint_gaps(layers, fx, &grads)) {
            *r = r.max(gap.frobenius_norm());
        }
    }
    let verdict = if max_interp >= tol_interpolation {
        Verdict::NotInterpolating
    } else if residuals.iter().any(|&r| r > tol_interpolation) {
        Verdict::Singular
    } else {
        Verdict::Regular
    };
    SingularityReport {
        verdict,
        max_interp_residual: max_interp,
        constraint_residuals: residuals,
    }
}
