#![allow(dead_code)]

use dsfa_core::net::{center, dsfa_loss, forward, LayerParams};
use dsfa_core::{NetworkParams, PixelMatrix};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> PixelMatrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let m = uniform(d, d, rng);
    m.dot(&m.t()) + Array2::<f64>::eye(d) * 0.5
}

pub fn random_symmetric(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let m = uniform(d, d, rng);
    (&m + &m.t()) * 0.5
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute deviation scaled by the largest reference magnitude.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central differences of `f` around `x`, one entry at a time.
pub fn numeric_gradient(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut grad = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let up = f(&probe);
        probe[[i, j]] = orig - h;
        let down = f(&probe);
        probe[[i, j]] = orig;
        grad[[i, j]] = (up - down) / (2.0 * h);
    }
    grad
}

/// Loss of the two-stream network evaluated from scratch.
pub fn network_loss(theta1: &NetworkParams, theta2: &NetworkParams, x: &Array2<f64>, y: &Array2<f64>, r: f64) -> f64 {
    let xc = center(&forward(theta1, x).unwrap().into_output()).unwrap();
    let yc = center(&forward(theta2, y).unwrap().into_output()).unwrap();
    dsfa_loss(&xc, &yc, r).unwrap()
}

pub fn flatten_grads(grads: &[LayerParams]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied().collect::<Vec<_>>())
        .collect()
}

/// Central differences over every weight and bias of `theta`, with `loss`
/// evaluated on the perturbed copy.
pub fn numeric_param_grads(theta: &NetworkParams, h: f64, loss: impl Fn(&NetworkParams) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut probe = theta.clone();
    for l in 0..theta.layers.len() {
        let (rows, cols) = theta.layers[l].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = probe.layers[l].weights[[i, j]];
                probe.layers[l].weights[[i, j]] = orig + h;
                let up = loss(&probe);
                probe.layers[l].weights[[i, j]] = orig - h;
                let down = loss(&probe);
                probe.layers[l].weights[[i, j]] = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
        for i in 0..rows {
            let orig = probe.layers[l].bias[i];
            probe.layers[l].bias[i] = orig + h;
            let up = loss(&probe);
            probe.layers[l].bias[i] = orig - h;
            let down = loss(&probe);
            probe.layers[l].bias[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Between-class variance of every split, straight from the definition.
pub fn brute_force_otsu(hist: &[u64]) -> usize {
    let total: f64 = hist.iter().map(|&h| h as f64).sum();
    let mut best = (0, -1.0);
    for k in 0..hist.len() {
        let (lower, upper) = hist.split_at(k + 1);
        let w0: f64 = lower.iter().map(|&h| h as f64).sum();
        let w1: f64 = upper.iter().map(|&h| h as f64).sum();
        if w0 == 0.0 || w1 == 0.0 {
            if best.1 < 0.0 {
                best = (k, 0.0);
            }
            continue;
        }
        let m0 = lower.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum::<f64>() / w0;
        let m1 = upper.iter().enumerate().map(|(i, &h)| (i + k + 1) as f64 * h as f64).sum::<f64>() / w1;
        let var = (w0 / total) * (w1 / total) * (m0 - m1).powi(2);
        if var > best.1 * (1.0 + 1e-9) {
            best = (k, var);
        }
    }
    best.0
}

/// Per-pixel loops over the definitions of the two SFA matrices.
pub fn naive_matrices(x: &Array2<f64>, y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = x.dim();
    let mut a = Array2::zeros((m, m));
    let mut b = Array2::zeros((m, m));
    for p in 0..n {
        for i in 0..m {
            for j in 0..m {
                let di = x[[i, p]] - y[[i, p]];
                let dj = x[[j, p]] - y[[j, p]];
                a[[i, j]] += di * dj;
                b[[i, j]] += x[[i, p]] * x[[j, p]] + y[[i, p]] * y[[j, p]];
            }
        }
    }
    (a / n as f64, b / (2.0 * n as f64))
}
