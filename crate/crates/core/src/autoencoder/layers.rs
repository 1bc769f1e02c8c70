//! Dense, batch-norm and leaky-ReLU layers with explicit backward passes.
//!
//! All tensors are `batch × features`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Returns `(dx, grads)` given the forward input and `dL/dy`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> (Array2<f64>, DenseGrads) {
        let dx = dy.dot(&self.weight.t());
        let grads = DenseGrads {
            weight: x.t().dot(&dy),
            bias: dy.sum_axis(Axis(0)),
        };
        (dx, grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakyRelu {
    pub slope: f64,
}

impl LeakyRelu {
    pub fn apply(&self, v: f64) -> f64 {
        if v >= 0.0 {
            v
        } else {
            self.slope * v
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.mapv(|v| self.apply(v))
    }

    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        let mut dx = dy.to_owned();
        dx.zip_mut_with(&x, |d, &v| {
            if v < 0.0 {
                *d *= self.slope
            }
        });
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    /// Unbiased (n-1) running variance, as accumulated in training.
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Per-batch values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    pub unbiased_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl BatchNorm {
    pub fn new(width: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            eps,
            momentum,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let scale = &self.gamma / &self.running_var.mapv(|v| (v + self.eps).sqrt());
        let shift = &self.beta - &(&self.running_mean * &scale);
        let mut y = &x * &scale;
        y += &shift;
        y
    }

    /// Normalizes with batch statistics; needs at least two rows.
    pub fn forward_train(&self, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &x - &mean;
        let biased_var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = biased_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let x_hat = &centered * &inv_std;
        let mut y = &x_hat * &self.gamma;
        y += &self.beta;
        let unbiased_var = &biased_var * (n / (n - 1.0));
        (
            y,
            BatchNormCache {
                x_hat,
                inv_std,
                mean,
                unbiased_var,
            },
        )
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: ArrayView2<f64>) -> (Array2<f64>, BatchNormGrads) {
        let n = dy.nrows() as f64;
        let grads = BatchNormGrads {
            gamma: (&dy * &cache.x_hat).sum_axis(Axis(0)),
            beta: dy.sum_axis(Axis(0)),
        };
        let dx_hat = &dy * &self.gamma;
        let sum_dx_hat = dx_hat.sum_axis(Axis(0));
        let sum_dx_hat_xhat = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
        let mut dx = &dx_hat * n;
        dx -= &sum_dx_hat;
        dx -= &(&cache.x_hat * &sum_dx_hat_xhat);
        dx *= &(&cache.inv_std / n);
        (dx, grads)
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &cache.unbiased_var * m;
    }
}
