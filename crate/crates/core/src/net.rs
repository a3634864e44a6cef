//! Bias-free deep ReLU networks with a scalar output, and their split into a
//! scale `ρ` and unit-norm layer directions `V_k`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Vector, TAU_NORM};

/// How the weight matrices of a [`NormalizedNet`] are constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Each `V_k` has unit Frobenius norm.
    Matrix,
    /// Each row of each `V_k` has unit Euclidean norm.
    Row,
}

/// Raw weights `W_1 … W_L`. `W_L` has a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Matrix>,
}

fn check_chain(layers: &[Matrix]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (k, pair) in layers.windows(2).enumerate() {
        if pair[1].cols() != pair[0].rows() {
            return Err(Error::Layer {
                layer: k + 2,
                reason: format!(
                    "expects {} inputs but layer {} has {} outputs",
                    pair[1].cols(),
                    k + 1,
                    pair[0].rows()
                ),
            });
        }
    }
    let last = layers.last().expect("non-empty");
    if last.rows() != 1 {
        return Err(Error::Layer {
            layer: layers.len(),
            reason: format!("output layer must have 1 row, has {}", last.rows()),
        });
    }
    Ok(())
}

impl NetworkParams {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        check_chain(&layers)?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    /// `[d, n_1, …, n_{L-1}, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        widths_of(&self.layers)
    }

    /// Product of the Frobenius norms of all layers.
    pub fn rho(&self) -> f64 {
        self.layers.iter().map(Matrix::frobenius_norm).product()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        check_input(&self.layers, x)?;
        Ok(relu_forward(&self.layers, x))
    }

    /// Output and its gradient with respect to every `W_k`.
    pub fn output_and_grads(&self, x: &[f64]) -> Result<(f64, Vec<Matrix>)> {
        check_input(&self.layers, x)?;
        Ok(backprop(&self.layers, x))
    }
}

pub fn forward(net: &NetworkParams, x: &[f64]) -> Result<f64> {
    net.forward(x)
}

fn widths_of(layers: &[Matrix]) -> Vec<usize> {
    let mut w = vec![layers[0].cols()];
    w.extend(layers.iter().map(Matrix::rows));
    w
}

fn check_input(layers: &[Matrix], x: &[f64]) -> Result<()> {
    if x.len() != layers[0].cols() {
        return Err(Error::Shape {
            op: "forward",
            left: layers[0].shape(),
            right: (x.len(), 1),
        });
    }
    Ok(())
}

fn relu_in_place(z: &mut [f64]) {
    for v in z {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Linear-then-ReLU on every hidden layer, linear output.
pub(crate) fn relu_forward(layers: &[Matrix], x: &[f64]) -> f64 {
    let (last, hidden) = layers.split_last().expect("non-empty");
    let mut h = x.to_vec();
    for w in hidden {
        h = w.mul_vec(&h);
        relu_in_place(&mut h);
    }
    dot(last.row(0), &h)
}

/// Post-activation inputs to every layer: `h_0 = x, h_1, …, h_{L-1}`.
pub(crate) fn layer_inputs(layers: &[Matrix], x: &[f64]) -> Vec<Vector> {
    let mut hs = Vec::with_capacity(layers.len());
    hs.push(x.to_vec());
    for w in &layers[..layers.len() - 1] {
        let mut z = w.mul_vec(hs.last().expect("non-empty"));
        relu_in_place(&mut z);
        hs.push(z);
    }
    hs
}

/// Output and `∂out/∂W_k` for every layer, with the ReLU derivative taken as
/// the activation indicator (zero at exactly zero).
pub(crate) fn backprop(layers: &[Matrix], x: &[f64]) -> (f64, Vec<Matrix>) {
    let hs = layer_inputs(layers, x);
    let depth = layers.len();
    let out = dot(layers[depth - 1].row(0), &hs[depth - 1]);
    let mut grads = vec![Matrix::zeros(0, 0); depth];
    let mut delta = vec![1.0];
    for k in (0..depth).rev() {
        grads[k] = Matrix::outer(&delta, &hs[k]);
        if k > 0 {
            let mut back = layers[k].mul_vec_transposed(&delta);
            // hs[k] > 0 exactly where the unit was active
            for (b, &h) in back.iter_mut().zip(&hs[k]) {
                if h <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
    }
    (out, grads)
}

/// ReLU on/off states `D_1(x) … D_{L-1}(x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    diag: Vec<Vec<bool>>,
}

impl ActivationPattern {
    pub fn new(diag: Vec<Vec<bool>>) -> Self {
        Self { diag }
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.diag
    }

    /// The diagonal of `D_k` as 0/1 reals (1-based `k`).
    pub fn diagonal(&self, k: usize) -> Vector {
        self.diag[k - 1].iter().map(|&on| if on { 1.0 } else { 0.0 }).collect()
    }
}

/// `ρ` together with normalized layer matrices `V_1 … V_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedNet {
    pub(crate) rho: f64,
    pub(crate) layers: Vec<Matrix>,
    mode: NormMode,
    // Row mode only: the original per-row norms, so recomposition is exact.
    row_scales: Vec<Vector>,
}

impl NormalizedNet {
    /// Wraps already-normalized matrices. In row mode the hidden rows are
    /// taken to carry scale 1 and the output row carries `ρ`.
    pub fn new(rho: f64, layers: Vec<Matrix>, mode: NormMode) -> Result<Self> {
        let row_scales = match mode {
            NormMode::Matrix => Vec::new(),
            NormMode::Row => {
                let depth = layers.len();
                layers
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let s = if k + 1 == depth { rho } else { 1.0 };
                        vec![s; v.rows()]
                    })
                    .collect()
            }
        };
        Self::with_row_scales(rho, layers, mode, row_scales)
    }

    pub fn with_row_scales(rho: f64, layers: Vec<Matrix>, mode: NormMode, row_scales: Vec<Vector>) -> Result<Self> {
        check_chain(&layers)?;
        if !rho.is_finite() || rho < 0.0 {
            return Err(Error::Config(format!("rho must be finite and >= 0, got {rho}")));
        }
        check_normalized(&layers, mode)?;
        if mode == NormMode::Row {
            let ok =
                row_scales.len() == layers.len() && row_scales.iter().zip(&layers).all(|(s, v)| s.len() == v.rows());
            if !ok {
                return Err(Error::Config("row scales do not match layer shapes".into()));
            }
        }
        Ok(Self {
            rho,
            layers,
            mode,
            row_scales,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn row_scales(&self) -> &[Vector] {
        &self.row_scales
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        widths_of(&self.layers)
    }

    /// Same directions, different scale.
    pub fn with_rho(&self, rho: f64) -> Self {
        let mut out = self.clone();
        if out.mode == NormMode::Row {
            if let Some(last) = out.row_scales.last_mut() {
                let old = self.rho;
                for s in last.iter_mut() {
                    *s = if old > 0.0 { *s * rho / old } else { rho };
                }
            }
        }
        out.rho = rho;
        out
    }

    /// Rebuilds raw weights. Matrix mode puts all of `ρ` on the last layer.
    pub fn recompose(&self) -> NetworkParams {
        let depth = self.layers.len();
        let layers = match self.mode {
            NormMode::Matrix => self
                .layers
                .iter()
                .enumerate()
                .map(|(k, v)| if k + 1 == depth { v.scaled(self.rho) } else { v.clone() })
                .collect(),
            NormMode::Row => self
                .layers
                .iter()
                .zip(&self.row_scales)
                .map(|(v, scales)| {
                    let mut w = v.clone();
                    for (r, &s) in scales.iter().enumerate() {
                        w.row_mut(r).iter_mut().for_each(|e| *e *= s);
                    }
                    w
                })
                .collect(),
        };
        NetworkParams { layers }
    }

    /// `f(x)`, the normalized network's output.
    pub fn output(&self, x: &[f64]) -> Result<f64> {
        check_input(&self.layers, x)?;
        Ok(relu_forward(&self.layers, x))
    }

    pub fn outputs(&self, data: &Dataset) -> Result<Vector> {
        data.inputs().iter().map(|x| self.output(x)).collect()
    }

    /// Inputs to the last layer (penultimate-layer features).
    pub fn penultimate(&self, x: &[f64]) -> Result<Vector> {
        check_input(&self.layers, x)?;
        Ok(layer_inputs(&self.layers, x).pop().expect("non-empty"))
    }
}

fn check_normalized(layers: &[Matrix], mode: NormMode) -> Result<()> {
    for (k, v) in layers.iter().enumerate() {
        match mode {
            NormMode::Matrix => {
                let n = v.frobenius_norm();
                if (n - 1.0).abs() > TAU_NORM {
                    return Err(Error::Layer {
                        layer: k + 1,
                        reason: format!("Frobenius norm {n} is not 1"),
                    });
                }
            }
            NormMode::Row => {
                if let Some((r, n)) = v
                    .row_norms()
                    .into_iter()
                    .enumerate()
                    .find(|(_, n)| (n - 1.0).abs() > TAU_NORM)
                {
                    return Err(Error::Layer {
                        layer: k + 1,
                        reason: format!("row {r} has norm {n}, expected 1"),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Splits `W_k` into unit-norm directions and the scale `ρ = Π ‖W_k‖_F`.
pub fn decompose(net: &NetworkParams, mode: NormMode) -> Result<NormalizedNet> {
    let rho = net.rho();
    let mut layers = Vec::with_capacity(net.depth());
    let mut row_scales = Vec::new();
    for (k, w) in net.layers.iter().enumerate() {
        match mode {
            NormMode::Matrix => {
                let n = w.frobenius_norm();
                if n == 0.0 {
                    return Err(Error::Layer {
                        layer: k + 1,
                        reason: "zero matrix cannot be normalized".into(),
                    });
                }
                layers.push(w.divided(n));
            }
            NormMode::Row => {
                let norms = w.row_norms();
                let mut v = w.clone();
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        return Err(Error::Layer {
                            layer: k + 1,
                            reason: format!("row {r} is zero and cannot be normalized"),
                        });
                    }
                    v.row_mut(r).iter_mut().for_each(|e| *e /= n);
                }
                layers.push(v);
                row_scales.push(norms);
            }
        }
    }
    Ok(NormalizedNet {
        rho,
        layers,
        mode,
        row_scales,
    })
}

pub fn activation_pattern(nnet: &NormalizedNet, x: &[f64]) -> Result<ActivationPattern> {
    check_input(&nnet.layers, x)?;
    let mut h = x.to_vec();
    let mut diag = Vec::with_capacity(nnet.depth().saturating_sub(1));
    for w in &nnet.layers[..nnet.depth() - 1] {
        let mut z = w.mul_vec(&h);
        diag.push(z.iter().map(|&v| v > 0.0).collect());
        relu_in_place(&mut z);
        h = z;
    }
    Ok(ActivationPattern { diag })
}

/// `f(x) = V_L D_{L-1} V_{L-1} ⋯ D_1 V_1 x` evaluated as an explicit matrix
/// product for a fixed activation pattern.
pub fn forward_product(nnet: &NormalizedNet, pattern: &ActivationPattern, x: &[f64]) -> Result<f64> {
    check_input(&nnet.layers, x)?;
    let depth = nnet.depth();
    if pattern.diag.len() != depth - 1 {
        return Err(Error::Shape {
            op: "forward_product",
            left: (depth - 1, 0),
            right: (pattern.diag.len(), 0),
        });
    }
    // Accumulate the row vector from the output side.
    let mut product = nnet.layers[depth - 1].clone();
    for k in (0..depth - 1).rev() {
        let d = &pattern.diag[k];
        if d.len() != product.cols() {
            return Err(Error::Shape {
                op: "forward_product",
                left: product.shape(),
                right: (d.len(), d.len()),
            });
        }
        let mut masked = product;
        for r in 0..masked.rows() {
            for (e, &on) in masked.row_mut(r).iter_mut().zip(d) {
                if !on {
                    *e = 0.0;
                }
            }
        }
        product = masked.matmul(&nnet.layers[k])?;
    }
    Ok(dot(product.row(0), x))
}

/// `∂f/∂V_k` for every layer, with the activation pattern held fixed.
pub fn grad_f_v(nnet: &NormalizedNet, x: &[f64]) -> Result<Vec<Matrix>> {
    check_input(&nnet.layers, x)?;
    Ok(backprop(&nnet.layers, x).1)
}

/// `y_n f(x_n)` for every sample.
pub fn margins(nnet: &NormalizedNet, data: &Dataset) -> Result<Vector> {
    data.iter().map(|(x, y)| nnet.output(x).map(|f| y * f)).collect()
}

/// Per-layer `‖V_k f(x) − ∂f/∂V_k(x)‖_F`.
pub fn euler_characterization_check(nnet: &NormalizedNet, x: &[f64]) -> Result<Vector> {
    check_input(&nnet.layers, x)?;
    let (f, grads) = backprop(&nnet.layers, x);
    Ok(constraint_gaps(&nnet.layers, f, &grads)
        .iter()
        .map(Matrix::frobenius_norm)
        .collect())
}

/// `V_k f − ∂f/∂V_k` for every layer.
pub(crate) fn constraint_gaps(layers: &[Matrix], f: f64, grads: &[Matrix]) -> Vec<Matrix> {
    layers
        .iter()
        .zip(grads)
        .map(|(v, g)| {
            let mut gap = v.scaled(f);
            gap.axpy(-1.0, g);
            gap
        })
        .collect()
}

/// Replaces the last layer with the minimum-norm row `w` solving
/// `w · h_{L-1}(x_n) = y_n` for every sample, then renormalizes so that the
/// result interpolates exactly: `ρ f(x_n) = y_n`.
///
/// Needs the penultimate features of the samples to be linearly independent.
pub fn fit_last_layer(nnet: &NormalizedNet, data: &Dataset) -> Result<NormalizedNet> {
    if nnet.mode != NormMode::Matrix {
        return Err(Error::Config("fit_last_layer needs a matrix-mode net".into()));
    }
    let feats: Vec<Vector> = data
        .inputs()
        .iter()
        .map(|x| nnet.penultimate(x))
        .collect::<Result<_>>()?;
    let n = feats.len();
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gram.as_mut_slice()[i * n + j] = dot(&feats[i], &feats[j]);
        }
    }
    let alpha = crate::numerics::solve_linear(&gram, data.labels())?;
    let width = feats.first().map_or(0, Vec::len);
    let mut w = vec![0.0; width];
    for (a, h) in alpha.iter().zip(&feats) {
        for (wi, hi) in w.iter_mut().zip(h) {
            *wi += a * hi;
        }
    }
    let rho = crate::numerics::norm(&w);
    if rho == 0.0 {
        return Err(Error::Singular);
    }
    let mut layers = nnet.layers.clone();
    let depth = layers.len();
    layers[depth - 1] = Matrix::new(1, width, w.iter().map(|v| v / rho).collect())?;
    NormalizedNet::new(rho, layers, NormMode::Matrix)
}
