//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use slipnap_core::autoencoder::{AeModel, Block};
use slipnap_core::streamsync::Label;

/// One-sided Jacobi SVD. Returns singular values (descending) and the
/// matching right singular vectors as columns of an `n × n` matrix.
pub fn jacobi_svd(a: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    let mut u = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    alpha += u[[r, i]] * u[[r, i]];
                    beta += u[[r, j]] * u[[r, j]];
                    gamma += u[[r, i]] * u[[r, j]];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (u[[r, i]], u[[r, j]]);
                    u[[r, i]] = c * x - s * y;
                    u[[r, j]] = s * x + c * y;
                }
                for r in 0..n {
                    let (x, y) = (v[[r, i]], v[[r, j]]);
                    v[[r, i]] = c * x - s * y;
                    v[[r, j]] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = (0..n).map(|k| u.column(k).dot(&u.column(k)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    let sorted: Vec<f64> = order.iter().map(|&k| sigma[k]).collect();
    let mut vs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vs.column_mut(dst).assign(&v.column(src));
    }
    (sorted, vs)
}

/// Brute-force NAP score: explicit centering, Jacobi SVD, explicit
/// projection, relative truncation.
pub fn brute_force_scores(train: ArrayView2<f64>, queries: ArrayView2<f64>, truncation: f64) -> Vec<f64> {
    let (n, w) = train.dim();
    let mut mu = vec![0.0; w];
    for r in 0..n {
        for c in 0..w {
            mu[c] += train[[r, c]] / n as f64;
        }
    }
    let mut centered = train.to_owned();
    for r in 0..n {
        for c in 0..w {
            centered[[r, c]] -= mu[c];
        }
    }
    let (sigma, v) = jacobi_svd(centered.view());
    let max = sigma.first().copied().unwrap_or(0.0);
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut score = 0.0;
            for (k, &s) in sigma.iter().enumerate() {
                if s < truncation * max || s == 0.0 {
                    continue;
                }
                let mut p = 0.0;
                for c in 0..w {
                    p += (q[c] - mu[c]) * v[[c, k]];
                }
                score += (p / s).powi(2);
            }
            score
        })
        .collect()
}

/// AUROC by counting ordered (abnormal, normal) pairs, ties half.
pub fn pair_count_auroc(scores: &[f64], labels: &[Label]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| l.is_abnormal()).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !l.is_abnormal()).map(|(s, _)| *s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Eval-mode forward of one block from its public parameters.
pub fn block_forward(block: &Block, x: &[f64]) -> Vec<f64> {
    let w = &block.dense.weight;
    let mut y: Vec<f64> = (0..w.ncols())
        .map(|j| block.dense.bias[j] + (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
        .collect();
    if let Some(bn) = &block.norm {
        for (j, v) in y.iter_mut().enumerate() {
            *v = bn.gamma[j] * (*v - bn.running_mean[j]) / (bn.running_var[j] + bn.eps).sqrt() + bn.beta[j];
        }
    }
    if let Some(act) = &block.act {
        for v in y.iter_mut() {
            if *v < 0.0 {
                *v *= act.slope;
            }
        }
    }
    y
}

/// Encoder activations and reconstruction by composing blocks one at a time.
pub fn composed_forward(model: &AeModel, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut hidden = Vec::new();
    let mut h = x.to_vec();
    for b in model.encoder() {
        h = block_forward(b, &h);
        hidden.push(h.clone());
    }
    for b in model.decoder() {
        h = block_forward(b, &h);
    }
    (hidden, h)
}

/// `d = H(x) - H(x̂)` from the composed oracle.
pub fn composed_pathway(model: &AeModel, x: &[f64]) -> Vec<f64> {
    let (h, x_hat) = composed_forward(model, x);
    let (h_hat, _) = composed_forward(model, &x_hat);
    h.iter()
        .flatten()
        .zip(h_hat.iter().flatten())
        .map(|(a, b)| a - b)
        .collect()
}

/// Relative error with a small absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
