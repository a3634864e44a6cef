//! Minibatch heavy-ball SGD on the square loss, with batch normalization
//! emulated by projecting the hidden layers back onto their constraint set
//! after every step.
//!
//! The last layer is never normalized: it carries the scale `ρ`. The batch
//! loss is `Σ_{n∈batch} (g(x_n) − y_n)²`. Over one epoch the data term is
//! seen once while weight decay is applied once per batch, so a stationary
//! last layer satisfies `ρ = Σ y_n f_n / (λ' + Σ f_n²)` with `λ'` given by
//! [`effective_lambda`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{record_params, MetricTrace};
use crate::error::{Error, Result};
use crate::net::NetworkParams;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    None,
    Matrix,
    Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    pub normalize: Normalize,
    /// Frobenius norm given to every layer at initialization.
    pub init_frobenius: f64,
    pub seed: u64,
    /// Record a trace row every this many optimizer steps.
    pub trace_stride: usize,
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::Config(format!(
                "batch_size must lie in 1..={n_train}, got {}",
                self.batch_size
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.init_frobenius > 0.0 && self.init_frobenius.is_finite()) {
            return Err(Error::Config(format!(
                "init_frobenius must be positive, got {}",
                self.init_frobenius
            )));
        }
        if self.trace_stride == 0 {
            return Err(Error::Config("trace_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Coefficient `λ'` on `ρ²` that makes one epoch of SGD match the Lagrangian
/// `Σ_n (ρ f_n − y_n)² + λ' ρ²`: `wd · ⌈N / batch_size⌉`.
pub fn effective_lambda(weight_decay: f64, n_train: usize, batch_size: usize) -> f64 {
    weight_decay * n_train.div_ceil(batch_size) as f64
}

/// i.i.d. standard normal layers, each rescaled to Frobenius norm `init_frobenius`.
/// `widths = [d, n_1, …, n_{L-1}, 1]`.
pub fn init_network(widths: &[usize], init_frobenius: f64, seed: u64) -> Result<NetworkParams> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Config(format!("invalid widths {widths:?}")));
    }
    if init_frobenius.is_nan() || init_frobenius <= 0.0 {
        return Err(Error::Config("init_frobenius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.sample(StandardNormal)).collect();
            let mut m = Matrix::new(fan_out, fan_in, data)?;
            let n = m.frobenius_norm();
            m.scale_mut(init_frobenius / n);
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkParams::new(layers)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: NetworkParams,
    pub velocity: Vec<Matrix>,
    pub epoch: usize,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(net: NetworkParams, seed: u64) -> Self {
        let velocity = net.layers().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        Self {
            net,
            velocity,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed),
        }
    }
}

/// Projects every layer but the last onto its constraint set.
pub fn normalize_hidden(net: &mut NetworkParams, mode: Normalize) -> Result<()> {
    let depth = net.depth();
    for (k, w) in net.layers_mut().iter_mut().enumerate().take(depth - 1) {
        match mode {
            Normalize::None => {}
            Normalize::Matrix => {
                let n = w.frobenius_norm();
                if n == 0.0 {
                    return Err(Error::Layer {
                        layer: k + 1,
                        reason: "zero matrix cannot be normalized".into(),
                    });
                }
                w.scale_mut(1.0 / n);
            }
            Normalize::Row => {
                for r in 0..w.rows() {
                    let row = w.row_mut(r);
                    let n = crate::numerics::norm(row);
                    if n == 0.0 {
                        return Err(Error::Layer {
                            layer: k + 1,
                            reason: format!("row {r} is zero and cannot be normalized"),
                        });
                    }
                    row.iter_mut().for_each(|e| *e /= n);
                }
            }
        }
    }
    Ok(())
}

fn dump(state: &TrainState, batch_loss: f64) -> String {
    let norms: Vec<String> = state
        .net
        .layers()
        .iter()
        .map(|w| format!("{:e}", w.frobenius_norm()))
        .collect();
    let vel: Vec<String> = state
        .velocity
        .iter()
        .map(|v| format!("{:e}", v.frobenius_norm()))
        .collect();
    format!(
        "epoch {} step {}: batch loss {batch_loss:e}; layer norms [{}]; velocity norms [{}]",
        state.epoch,
        state.step,
        norms.join(", "),
        vel.join(", ")
    )
}

/// One momentum step on the summed batch loss plus `wd Σ ‖W_k‖²`:
/// `v ← μ v + ∇`, `W ← W − lr v`, then hidden-layer normalization.
pub fn sgd_step(state: &mut TrainState, data: &Dataset, batch: &[usize], cfg: &TrainConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let layers = state.net.layers();
    let mut grads: Vec<Matrix> = layers.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let mut batch_loss = 0.0;
    for &i in batch {
        let x = &data.inputs()[i];
        let y = data.labels()[i];
        let (g, dg) = state.net.output_and_grads(x)?;
        batch_loss += (g - y).powi(2);
        for (acc, d) in grads.iter_mut().zip(&dg) {
            acc.axpy(2.0 * (g - y), d);
        }
    }
    for (acc, w) in grads.iter_mut().zip(layers) {
        acc.axpy(2.0 * cfg.weight_decay, w);
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::TrainAborted {
            step: state.step,
            reason: format!("non-finite gradient in layer {}", k + 1),
            dump: dump(state, batch_loss),
        });
    }
    for ((v, g), w) in state
        .velocity
        .iter_mut()
        .zip(&grads)
        .zip(state.net.layers_mut().iter_mut())
    {
        v.scale_mut(cfg.momentum);
        v.axpy(1.0, g);
        w.axpy(-cfg.lr, v);
    }
    if state.net.layers().iter().any(|w| !w.is_finite()) {
        return Err(Error::TrainAborted {
            step: state.step,
            reason: "weights became non-finite".into(),
            dump: dump(state, batch_loss),
        });
    }
    normalize_hidden(&mut state.net, cfg.normalize)?;
    state.step += 1;
    Ok(())
}

/// Runs `epochs × ⌈N / batch_size⌉` steps, reshuffling every epoch. The last
/// short batch of an epoch is kept. Rows are recorded at step 0, every
/// `trace_stride` steps, and after the final step.
pub fn train(
    widths: &[usize],
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(TrainState, MetricTrace)> {
    cfg.validate(data.len())?;
    if data.dim() != widths.first().copied() {
        return Err(Error::Config(format!(
            "network input width {:?} does not match data dimension {:?}",
            widths.first(),
            data.dim()
        )));
    }
    let mut net = init_network(widths, cfg.init_frobenius, cfg.seed)?;
    // Under batch normalization the output does not depend on the scale of
    // the hidden layers, so only the last layer keeps its initial norm.
    normalize_hidden(&mut net, cfg.normalize)?;
    let mut state = TrainState::new(net, cfg.seed);
    let mut trace = MetricTrace::default();
    let record_row = |state: &TrainState| {
        let row = record_params(&state.net, data, val, state.step as f64)?;
        if !(row.loss.is_finite() && row.rho.is_finite()) {
            return Err(Error::TrainAborted {
                step: state.step,
                reason: format!("training loss {:e} at rho {:e}", row.loss, row.rho),
                dump: dump(state, row.loss),
            });
        }
        Ok(row)
    };
    trace.rows.push(record_row(&state)?);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        order.shuffle(&mut state.rng);
        for batch in order.chunks(cfg.batch_size) {
            sgd_step(&mut state, data, batch, cfg)?;
            if state.step.is_multiple_of(cfg.trace_stride) {
                trace.rows.push(record_row(&state)?);
            }
        }
    }
    state.epoch = cfg.epochs;
    if !state.step.is_multiple_of(cfg.trace_stride) {
        trace.rows.push(record_row(&state)?);
    }
    Ok((state, trace))
}
