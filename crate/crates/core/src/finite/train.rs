//! Full-batch gradient descent on `L = ½ Σ (f − y)²`.
//!
//! The sum (not mean) makes a step of size `η` the Euler discretization of
//! `df/dt = −η Θ (f − y)`, the flow solved in closed form by
//! [`crate::predict::gradient_descent_mse`].

use super::{FiniteNet, ParamTree};
use crate::batch::Batch;
use crate::error::{Error, Result};

/// Anything with parameters that can be fitted by gradient descent.
pub trait Trainable {
    /// Flat outputs for every example.
    fn predict(&self, params: &ParamTree, x: &Batch) -> Result<Vec<f64>>;

    /// Gradient of `⟨cotangent, predict(params, x)⟩`.
    fn vjp(&self, params: &ParamTree, x: &Batch, cotangent: &[f64]) -> Result<ParamTree>;

    /// Outputs, with the gradient for the cotangent `cot(outputs)` written
    /// into `grad` (which has the shape of `params`).
    fn value_and_vjp(
        &self,
        params: &ParamTree,
        x: &Batch,
        cot: &dyn Fn(&[f64]) -> Vec<f64>,
        grad: &mut ParamTree,
    ) -> Result<Vec<f64>> {
        let f = self.predict(params, x)?;
        *grad = self.vjp(params, x, &cot(&f))?;
        Ok(f)
    }
}

impl Trainable for FiniteNet {
    fn predict(&self, params: &ParamTree, x: &Batch) -> Result<Vec<f64>> {
        Ok(self.apply(params, x)?.into_data())
    }

    fn vjp(&self, params: &ParamTree, x: &Batch, cotangent: &[f64]) -> Result<ParamTree> {
        self.grad_params(params, x, cotangent)
    }

    fn value_and_vjp(
        &self,
        params: &ParamTree,
        x: &Batch,
        cot: &dyn Fn(&[f64]) -> Vec<f64>,
        grad: &mut ParamTree,
    ) -> Result<Vec<f64>> {
        self.value_and_grad_into(params, x, cot, grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    /// Heavy ball: `v ← γv − η∇L`, `θ ← θ + v`.
    Momentum {
        lr: f64,
        gamma: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Loss {
    #[default]
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub loss: Loss,
    pub steps: usize,
    /// Keep a parameter snapshot every this many steps (0 keeps none).
    pub record_every: usize,
    /// Keep train and test outputs every this many steps (0 keeps none).
    pub predict_every: usize,
}

impl TrainConfig {
    pub fn sgd(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig { optimizer: Optimizer::Sgd { lr }, loss: Loss::Mse, steps, record_every: 0, predict_every: 0 }
    }
}

/// Per-step history. Losses are `½·mean((f − y)²)`, recorded before each
/// update and once after the last, so they have `steps + 1` entries.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub params: ParamTree,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub snapshots: Vec<(usize, ParamTree)>,
    /// `(step, train outputs, test outputs)` every `predict_every` steps.
    pub trajectory: Vec<(usize, Vec<f64>, Vec<f64>)>,
    /// Final predictions on the training and test inputs.
    pub train_predictions: Vec<f64>,
    pub test_predictions: Vec<f64>,
}

const DIVERGENCE: f64 = 1e10;

fn half_mean_sq(f: &[f64], y: &[f64]) -> f64 {
    0.5 * f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.len().max(1) as f64
}

/// Trains `model` from `params` on `(x, y)`, tracking the loss on `test` if given.
pub fn train<M: Trainable + ?Sized>(
    model: &M,
    params: ParamTree,
    x: &Batch,
    y: &[f64],
    test: Option<(&Batch, &[f64])>,
    config: &TrainConfig,
) -> Result<TrainRecord> {
    let mut params = params;
    let mut grad = if config.steps > 0 { params.zeros_like() } else { ParamTree { layers: Vec::new() } };
    let mut velocity = matches!(config.optimizer, Optimizer::Momentum { .. }).then(|| params.zeros_like());
    let mut record = TrainRecord {
        params: params.clone(),
        train_loss: Vec::with_capacity(config.steps + 1),
        test_loss: Vec::new(),
        snapshots: Vec::new(),
        trajectory: Vec::new(),
        train_predictions: Vec::new(),
        test_predictions: Vec::new(),
    };
    for step in 0..=config.steps {
        let residual = |f: &[f64]| f.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<f64>>();
        let f = if step < config.steps {
            model.value_and_vjp(&params, x, &residual, &mut grad)?
        } else {
            model.predict(&params, x)?
        };
        if f.len() != y.len() {
            return Err(Error::Shape(format!("model gives {} outputs for {} targets", f.len(), y.len())));
        }
        let loss = half_mean_sq(&f, y);
        if loss.is_nan() || loss > DIVERGENCE {
            return Err(Error::Diverged { step, loss });
        }
        record.train_loss.push(loss);
        let mut ft = Vec::new();
        if let Some((xt, yt)) = test {
            ft = model.predict(&params, xt)?;
            record.test_loss.push(half_mean_sq(&ft, yt));
        }
        if config.predict_every > 0 && step % config.predict_every == 0 {
            record.trajectory.push((step, f.clone(), ft.clone()));
        }
        if step == config.steps {
            record.test_predictions = ft;
        }
        if config.record_every > 0 && step % config.record_every == 0 {
            record.snapshots.push((step, params.clone()));
        }
        if step == config.steps {
            record.train_predictions = f;
            break;
        }
        match (config.optimizer, &mut velocity) {
            (Optimizer::Sgd { lr }, _) => params.add_scaled(-lr, &grad),
            (Optimizer::Momentum { lr, gamma }, Some(v)) => {
                v.scale(gamma);
                v.add_scaled(-lr, &grad);
                params.add_scaled(1.0, v);
            }
            (Optimizer::Momentum { .. }, None) => unreachable!(),
        }
    }
    record.params = params;
    Ok(record)
}
