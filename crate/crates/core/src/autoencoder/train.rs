use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AeArchitecture, AeModel, Gradients, Mode};
use crate::error::{Error, Result};
use crate::fusion::FusedVector;
use crate::streamsync::Label;

/// Mini-batch Adam on mean squared reconstruction error, keeping the
/// snapshot with the lowest validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub shuffle_seed: u64,
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 200,
            patience: 20,
            shuffle_seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train: batch_size must be >= 2 for batch norm".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train: invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

fn stack(rows: &[FusedVector]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.values.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                got: r.values.len(),
            });
        }
        out.row_mut(i).assign(&Array1::from(r.values.clone()));
    }
    Ok(out)
}

/// Trains on normal-labeled vectors, selecting on `val`.
pub fn train(
    data: &[FusedVector],
    val: &[FusedVector],
    arch: &AeArchitecture,
    cfg: &TrainConfig,
) -> Result<(AeModel, TrainLog)> {
    if let Some(bad) = data.iter().chain(val).find(|v| v.label != Label::Normal) {
        return Err(Error::Format(format!(
            "training data must be normal, found {:?} tick at {}",
            bad.label, bad.tick_time
        )));
    }
    train_matrix(stack(data)?.view(), stack(val)?.view(), arch, cfg)
}

pub fn train_matrix(
    data: ArrayView2<f64>,
    val: ArrayView2<f64>,
    arch: &AeArchitecture,
    cfg: &TrainConfig,
) -> Result<(AeModel, TrainLog)> {
    cfg.validate()?;
    arch.validate()?;
    if data.nrows() == 0 {
        return Err(Error::EmptyInput("training split".into()));
    }
    if val.nrows() == 0 {
        return Err(Error::EmptyInput("validation split".into()));
    }
    for m in [&data, &val] {
        if m.ncols() != arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: arch.input_dim,
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training data".into()));
        }
    }

    let mut model = AeModel::new(arch.clone(), cfg.init_seed)?;
    let initial_val_loss = model.eval_mse(val)?;
    let mut log = TrainLog {
        initial_val_loss,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial_val_loss,
    };
    let mut best = model.clone();
    let n_params = model.flat_params().len();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.select(Axis(0), chunk);
            let (loss, grads, bn_caches) = model.train_step_parts(batch.view());
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            let mut params = model.flat_params();
            adam.step(&mut params, &Gradients::flatten(&grads), cfg);
            model.set_flat_params(&params)?;
            model.update_running_stats(&bn_caches);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        model.set_mode(Mode::Eval);
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        let val_loss = model.eval_mse(val)?;
        if !val_loss.is_finite() || !model.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: val_loss,
            });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    best.set_mode(Mode::Eval);
    Ok((best, log))
}
