//! Function-space gradient flow for arbitrary losses, integrated with an
//! adaptive Dormand–Prince 5(4) scheme.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const RTOL: f64 = 1e-8;
const ATOL: f64 = 1e-10;
const MAX_STEPS: usize = 5_000_000;

type GradFn = dyn Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64> + Send + Sync;

/// Loss on the training outputs, through its gradient `∇_f L(f, y)`.
#[derive(Clone)]
pub enum LossSpec {
    /// `½ Σ (f − y)²`.
    Mse,
    /// Softmax cross entropy per row, with `y` holding class probabilities.
    CrossEntropy,
    /// Any gradient map `(f, y) ↦ ∇_f L`.
    Custom(Arc<GradFn>),
}

impl fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::Mse => f.write_str("Mse"),
            LossSpec::CrossEntropy => f.write_str("CrossEntropy"),
            LossSpec::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl LossSpec {
    pub fn gradient(&self, f: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            LossSpec::Mse => f - y,
            LossSpec::CrossEntropy => {
                let mut g = f.clone();
                for mut row in g.row_iter_mut() {
                    let max = row.max();
                    row.apply(|v| *v = (*v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                g - y
            }
            LossSpec::Custom(grad) => grad(f, y),
        }
    }
}

/// Integrates `df/dt = −η [Θ; Θ_*] ∇L(f_train)`, or with momentum
/// `f'' = −γ f' − η [Θ; Θ_*] ∇L(f_train)` starting from rest.
#[derive(Clone, Debug)]
pub struct OdePredictor {
    loss: LossSpec,
    theta: DMatrix<f64>,
    theta_test: Option<DMatrix<f64>>,
    y: DMatrix<f64>,
    lr: f64,
    momentum: Option<f64>,
}

pub fn gradient_descent_ode(
    loss: LossSpec,
    theta: &DMatrix<f64>,
    y: &DMatrix<f64>,
    test_train: Option<&DMatrix<f64>>,
    lr: f64,
    momentum: Option<f64>,
) -> Result<OdePredictor> {
    let n = theta.nrows();
    if theta.ncols() != n || y.nrows() != n || test_train.is_some_and(|c| c.ncols() != n) {
        return Err(Error::Shape("train kernel, targets and cross kernel disagree in size".into()));
    }
    Ok(OdePredictor { loss, theta: theta.clone(), theta_test: test_train.cloned(), y: y.clone(), lr, momentum })
}

impl OdePredictor {
    /// Predictions at each time in `ts` (non-decreasing), from one integration.
    pub fn trajectory(
        &self,
        ts: &[f64],
        f0_train: Option<&DMatrix<f64>>,
        f0_test: Option<&DMatrix<f64>>,
    ) -> Result<Vec<super::Prediction>> {
        let (n, c) = self.y.shape();
        let m = self.theta_test.as_ref().map_or(0, |t| t.nrows());
        let zeros = |r| DMatrix::zeros(r, c);
        let f0 = f0_train.cloned().unwrap_or_else(|| zeros(n));
        let f0s = f0_test.cloned().unwrap_or_else(|| zeros(m));
        if f0.shape() != (n, c) || f0s.shape() != (m, c) {
            return Err(Error::Shape("initial outputs do not match the kernels".into()));
        }
        let half = (n + m) * c;
        let mut state: Vec<f64> = f0.iter().chain(f0s.iter()).copied().collect();
        if self.momentum.is_some() {
            state.resize(2 * half, 0.0);
        }

        let rhs = |s: &[f64], out: &mut [f64]| {
            let f = DMatrix::from_column_slice(n, c, &s[..n * c]);
            let g = self.loss.gradient(&f, &self.y);
            let df = -self.lr * (&self.theta * &g);
            let dfs = self.theta_test.as_ref().map(|t| -self.lr * (t * &g));
            let forces = df.iter().chain(dfs.iter().flat_map(|d| d.iter()));
            match self.momentum {
                None => out.iter_mut().zip(forces).for_each(|(o, v)| *o = *v),
                Some(gamma) => {
                    let (pos, vel) = out.split_at_mut(half);
                    pos.copy_from_slice(&s[half..]);
                    for ((o, v), f) in vel.iter_mut().zip(&s[half..]).zip(forces) {
                        *o = f - gamma * v;
                    }
                }
            }
        };

        let mut out = Vec::with_capacity(ts.len());
        let mut t = 0.0;
        let mut h = None;
        for &target in ts {
            if target < 0.0 || target.is_nan() {
                return Err(Error::NegativeTime(target));
            }
            if target < t {
                return Err(Error::InvalidArgument("times must be non-decreasing".into()));
            }
            if !target.is_finite() {
                return Err(Error::Unsupported("infinite time needs the closed-form predictor".into()));
            }
            h = dopri5(&rhs, &mut state, t, target, h)?;
            t = target;
            out.push(super::Prediction {
                train: DMatrix::from_column_slice(n, c, &state[..n * c]),
                test: self.theta_test.as_ref().map(|_| DMatrix::from_column_slice(m, c, &state[n * c..half])),
            });
        }
        Ok(out)
    }

    pub fn predict(
        &self,
        t: f64,
        f0_train: Option<&DMatrix<f64>>,
        f0_test: Option<&DMatrix<f64>>,
    ) -> Result<super::Prediction> {
        Ok(self.trajectory(&[t], f0_train, f0_test)?.remove(0))
    }
}

// Dormand–Prince tableau. The system is autonomous so the nodes are unused.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Advances `y` from `t0` to `t1`; returns the step size to try next.
fn dopri5(f: &dyn Fn(&[f64], &mut [f64]), y: &mut [f64], t0: f64, t1: f64, h0: Option<f64>) -> Result<Option<f64>> {
    if t1 == t0 {
        return Ok(h0);
    }
    let d = y.len();
    let mut k = vec![vec![0.0; d]; 7];
    let mut tmp = vec![0.0; d];
    let mut t = t0;
    f(y, &mut k[0]);
    let mut h = h0.unwrap_or_else(|| {
        let scale = |i: usize| ATOL + RTOL * y[i].abs();
        let n0 = (0..d).map(|i| (y[i] / scale(i)).powi(2)).sum::<f64>().sqrt();
        let n1 = (0..d).map(|i| (k[0][i] / scale(i)).powi(2)).sum::<f64>().sqrt();
        if n0 < 1e-5 || n1 < 1e-5 {
            1e-6
        } else {
            0.01 * n0 / n1
        }
    });
    for _ in 0..MAX_STEPS {
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        for s in 1..7 {
            for i in 0..d {
                tmp[i] = y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
            }
            f(&tmp, &mut k[s]);
        }
        // Row 6 of A is the fifth-order weights, so tmp holds that solution.
        let mut err = 0.0;
        for i in 0..d {
            let e = h * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            let sc = ATOL + RTOL * y[i].abs().max(tmp[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / d.max(1) as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Integrator { t, reason: "non-finite state".into() });
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            y.copy_from_slice(&tmp);
            let (first, rest) = k.split_at_mut(1);
            first[0].copy_from_slice(&rest[5]);
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            let next = h * grow;
            if last {
                return Ok(Some(next));
            }
            h = next;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            if h <= 1e-14 * t.abs().max(1e-300) || h < f64::MIN_POSITIVE {
                return Err(Error::Integrator { t, reason: "step size underflow".into() });
            }
        }
    }
    Err(Error::Integrator { t, reason: format!("exceeded {MAX_STEPS} steps") })
}
