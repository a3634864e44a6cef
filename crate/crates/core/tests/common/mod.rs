#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sqlossflow_core::data::{augment_and_normalize, Dataset};
use sqlossflow_core::net::decompose;
use sqlossflow_core::sgd::init_network;
use sqlossflow_core::{Matrix, NetworkParams, NormMode, NormalizedNet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `[d, h, …, h, 1]` with `depth` layers.
pub fn widths(d: usize, hidden: usize, depth: usize) -> Vec<usize> {
    let mut w = vec![d];
    w.extend(std::iter::repeat_n(hidden, depth - 1));
    w.push(1);
    w
}

pub fn random_net(widths: &[usize], seed: u64) -> NetworkParams {
    init_network(widths, 1.0, seed).unwrap()
}

/// Random layers with random (not unit) Frobenius norms.
pub fn random_scaled_net(widths: &[usize], rng: &mut ChaCha8Rng) -> NetworkParams {
    let layers = widths
        .windows(2)
        .map(|w| {
            let scale = rng.random_range(0.2..3.0);
            let data = gaussian(rng, w[0] * w[1]).into_iter().map(|v| v * scale).collect();
            Matrix::new(w[1], w[0], data).unwrap()
        })
        .collect();
    NetworkParams::new(layers).unwrap()
}

pub fn matrix_net(net: &NetworkParams) -> NormalizedNet {
    decompose(net, NormMode::Matrix).unwrap()
}

/// Hidden pre-activations up to (and including) the first layer with no
/// active unit, evaluated directly.
pub fn preactivations(layers: &[Matrix], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut h = x.to_vec();
    for w in &layers[..layers.len() - 1] {
        let z = w.matvec(&h).unwrap();
        out.extend_from_slice(&z);
        h = z.into_iter().map(|v| v.max(0.0)).collect();
        // a dead layer feeds exact zeros forward, which no small perturbation revives
        if h.iter().all(|&v| v == 0.0) {
            break;
        }
    }
    out
}

/// A random input whose hidden pre-activations all sit at least `gap` away
/// from zero.
pub fn kink_free_input(layers: &[Matrix], rng: &mut ChaCha8Rng, gap: f64) -> Vec<f64> {
    let d = layers[0].cols();
    loop {
        let x = gaussian(rng, d);
        if preactivations(layers, &x).iter().all(|z| z.abs() >= gap) {
            return x;
        }
    }
}

/// `n` unit inputs with alternating labels.
pub fn random_dataset(n: usize, raw_dim: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let inputs = (0..n).map(|_| augment_and_normalize(&gaussian(rng, raw_dim))).collect();
    let labels = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    Dataset::new(inputs, labels).unwrap()
}

/// Plain ReLU network output, written independently of the crate.
pub fn naive_forward(layers: &[Matrix], x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    for (k, w) in layers.iter().enumerate() {
        let mut z = vec![0.0; w.rows()];
        for (r, zr) in z.iter_mut().enumerate() {
            for (c, hc) in h.iter().enumerate() {
                *zr += w.get(r, c) * hc;
            }
        }
        if k + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    h[0]
}

/// Central differences of `naive_forward` with respect to every entry of layer `k`.
pub fn fd_layer_grad(layers: &[Matrix], k: usize, x: &[f64], h: f64) -> Vec<f64> {
    let (rows, cols) = layers[k].shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let mut plus = layers.to_vec();
        let mut minus = layers.to_vec();
        let mut p = plus[k].as_slice().to_vec();
        let mut m = minus[k].as_slice().to_vec();
        p[i] += h;
        m[i] -= h;
        plus[k] = Matrix::new(rows, cols, p).unwrap();
        minus[k] = Matrix::new(rows, cols, m).unwrap();
        out.push((naive_forward(&plus, x) - naive_forward(&minus, x)) / (2.0 * h));
    }
    out
}
