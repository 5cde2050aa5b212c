//! Predictions from kernels: GP posteriors, gradient-descent dynamics in
//! function space, and likelihoods.
//!
//! Training minimizes `L = ½ Σ (f − y)²` over the training set, so
//! gradient flow with learning rate `η` obeys `df/dt = −η Θ (f − y)` and
//! has the closed form `f_t = y + e^{−ηΘt}(f_0 − y)` on the training points.
//!
//! Regularization everywhere adds `diag_reg · tr(K)/n` to the diagonal.
//!
//! ```
//! use nalgebra::DMatrix;
//! use tangent_kernels::predict::{gp_inference, Mode};
//! use tangent_kernels::Kernel;
//!
//! let train = Kernel { nngp: DMatrix::from_element(1, 1, 1.0), ntk: None };
//! let cross = Kernel { nngp: DMatrix::from_element(1, 1, 0.5), ntk: None };
//! let test = Kernel { nngp: DMatrix::from_element(1, 1, 1.0), ntk: None };
//! let y = DMatrix::from_element(1, 1, 2.0);
//! let post = gp_inference(&train, &cross, Some(&test), &y, Mode::Nngp, 0.0).unwrap();
//! assert!((post.mean[(0, 0)] - 1.0).abs() < 1e-15);
//! assert!((post.cov.unwrap()[(0, 0)] - 0.75).abs() < 1e-15);
//! ```

mod ode;

pub use ode::{gradient_descent_ode, LossSpec, OdePredictor};

use nalgebra::{DMatrix, DVector};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::kernel::{Get, Kernel, KernelFunction};
use crate::linalg::{cholesky, mean_trace, regularized, sym_eigen};

/// Which kernel drives inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Bayesian posterior of the infinitely wide network.
    Nngp,
    /// Infinitely wide network trained to convergence by gradient descent.
    Ntk,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "nngp" => Ok(Mode::Nngp),
            "ntk" => Ok(Mode::Ntk),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}; expected nngp or ntk"))),
        }
    }
}

/// Posterior mean (`test × classes`) and optional test covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: DMatrix<f64>,
    pub cov: Option<DMatrix<f64>>,
}

fn pick<'a>(k: &'a Kernel, mode: Mode, what: &str) -> Result<&'a DMatrix<f64>> {
    match mode {
        Mode::Nngp => Ok(&k.nngp),
        Mode::Ntk => {
            k.ntk.as_ref().ok_or_else(|| Error::InvalidArgument(format!("NTK mode needs the NTK of the {what} kernel")))
        }
    }
}

fn check_shapes(train: &DMatrix<f64>, cross: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    let n = train.nrows();
    if train.ncols() != n {
        return Err(Error::Shape(format!("train kernel is {}x{}", n, train.ncols())));
    }
    if cross.ncols() != n || y.nrows() != n {
        return Err(Error::Shape(format!(
            "train kernel has {n} points, cross kernel {} columns, targets {} rows",
            cross.ncols(),
            y.nrows()
        )));
    }
    Ok(())
}

/// Regularization added to the diagonal of `k`.
pub fn regularization(k: &DMatrix<f64>, diag_reg: f64) -> f64 {
    diag_reg * mean_trace(k)
}

/// Posterior of the NNGP, or the infinite-time NTK predictor.
///
/// NNGP: `μ = K_* K̃⁻¹ Y`, `Σ = K_** − K_* K̃⁻¹ K_*ᵀ`.
/// NTK: `μ = Θ_* Θ̃⁻¹ Y`, and with `A = Θ_* Θ̃⁻¹` the covariance over random
/// initializations is `Σ = K_** + A K Aᵀ − A K_*ᵀ − K_* Aᵀ`.
/// The covariance is computed when `test` (the test-test kernel) is given.
pub fn gp_inference(
    train: &Kernel,
    test_train: &Kernel,
    test: Option<&Kernel>,
    y: &DMatrix<f64>,
    mode: Mode,
    diag_reg: f64,
) -> Result<Posterior> {
    let k = pick(train, mode, "train")?;
    let ks = pick(test_train, mode, "test-train")?;
    check_shapes(k, ks, y)?;
    let chol = cholesky(&regularized(k, regularization(k, diag_reg)))?;
    let mean = ks * chol.solve(y);
    let cov = match test {
        None => None,
        Some(test) => {
            let kss = &test.nngp;
            Some(match mode {
                Mode::Nngp => kss - ks * chol.solve(&ks.transpose()),
                Mode::Ntk => {
                    // A = Θ_* Θ̃⁻¹, formed as (Θ̃⁻¹ Θ_*ᵀ)ᵀ.
                    let a = chol.solve(&ks.transpose()).transpose();
                    let kx = &test_train.nngp;
                    let akx = &a * kx.transpose();
                    kss + &a * &train.nngp * a.transpose() - &akx - akx.transpose()
                }
            })
        }
    };
    Ok(Posterior { mean, cov })
}

/// [`gp_inference`] with kernels computed by `kernel_fn`.
pub fn gp_inference_with(
    kernel_fn: &dyn KernelFunction,
    x_train: &Batch,
    y: &DMatrix<f64>,
    x_test: &Batch,
    mode: Mode,
    diag_reg: f64,
    compute_cov: bool,
) -> Result<Posterior> {
    let get = match mode {
        Mode::Nngp => Get::Nngp,
        Mode::Ntk => Get::Both,
    };
    let train = kernel_fn.compute(x_train, None, get)?;
    let cross = kernel_fn.compute(x_test, Some(x_train), get)?;
    let test = if compute_cov { Some(kernel_fn.compute(x_test, None, Get::Nngp)?) } else { None };
    gp_inference(&train, &cross, test.as_ref(), y, mode, diag_reg)
}

/// Eigenvalue extremes of a symmetric matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionReport {
    pub min_eig: f64,
    pub max_eig: f64,
    /// `λ_max / max(λ_min, 1e-12·λ_max)`.
    pub condition: f64,
    /// Eigenvalues below `1e-12·λ_max`, which dynamics treat as that floor.
    pub clipped: usize,
}

pub(crate) const EIG_FLOOR: f64 = 1e-12;

pub fn condition_report(k: &DMatrix<f64>) -> ConditionReport {
    let (eig, _) = sym_eigen(k);
    let max_eig = eig.max();
    let min_eig = eig.min();
    let floor = EIG_FLOOR * max_eig;
    ConditionReport {
        min_eig,
        max_eig,
        condition: max_eig / min_eig.max(floor),
        clipped: eig.iter().filter(|&&v| v < floor).count(),
    }
}

/// Mean over classes and points of the Gaussian negative log marginal
/// likelihood `½yᵀK̃⁻¹y + ½log det K̃ + (n/2) log 2π`.
pub fn marginal_nll(k: &DMatrix<f64>, y: &DMatrix<f64>, diag_reg: f64) -> Result<f64> {
    let n = k.nrows();
    if k.ncols() != n || y.nrows() != n {
        return Err(Error::Shape(format!("kernel is {}x{}, targets have {} rows", n, k.ncols(), y.nrows())));
    }
    let chol = cholesky(&regularized(k, regularization(k, diag_reg)))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().take(n).map(|d| d.ln()).sum::<f64>();
    let alpha = chol.solve(y);
    let classes = y.ncols().max(1);
    let quad: f64 = (0..y.ncols()).map(|c| y.column(c).dot(&alpha.column(c))).sum();
    let total = 0.5 * quad / classes as f64 + 0.5 * logdet + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(total / n as f64)
}

/// Mean per-point Gaussian NLL of `y` under independent marginals with the
/// given means and the diagonal of `cov` plus `noise_var`.
pub fn predictive_nll(mean: &DMatrix<f64>, cov: &DMatrix<f64>, y: &DMatrix<f64>, noise_var: f64) -> Result<f64> {
    if mean.shape() != y.shape() || cov.nrows() != y.nrows() {
        return Err(Error::Shape("mean, covariance and targets disagree in size".into()));
    }
    let mut total = 0.0;
    for i in 0..y.nrows() {
        let var = cov[(i, i)] + noise_var;
        if var <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eig: var });
        }
        for c in 0..y.ncols() {
            let r = y[(i, c)] - mean[(i, c)];
            total += 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var);
        }
    }
    Ok(total / y.len() as f64)
}

/// Closed-form gradient-flow predictor for the squared loss.
///
/// Built from the eigendecomposition `Θ = V diag(λ) Vᵀ` of the (regularized)
/// train NTK, so `e^{−ηΘt}` is exact per mode. Eigenvalues below
/// `1e-12·λ_max` are raised to that floor.
#[derive(Clone, Debug)]
pub struct MsePredictor {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    test_train: Option<DMatrix<f64>>,
    y: DMatrix<f64>,
    lr: f64,
}

/// Training-time predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub train: DMatrix<f64>,
    pub test: Option<DMatrix<f64>>,
}

pub fn gradient_descent_mse(
    theta: &DMatrix<f64>,
    y: &DMatrix<f64>,
    test_train: Option<&DMatrix<f64>>,
    lr: f64,
    diag_reg: f64,
) -> Result<MsePredictor> {
    let n = theta.nrows();
    if theta.ncols() != n || y.nrows() != n || test_train.is_some_and(|c| c.ncols() != n) {
        return Err(Error::Shape("train kernel, targets and cross kernel disagree in size".into()));
    }
    let (mut eigenvalues, eigenvectors) = sym_eigen(&regularized(theta, regularization(theta, diag_reg)));
    let max = eigenvalues.max();
    if eigenvalues.min() < -1e-8 * max.abs().max(1e-300) {
        return Err(Error::NotPositiveDefinite { min_eig: eigenvalues.min() });
    }
    let floor = EIG_FLOOR * max;
    eigenvalues.iter_mut().for_each(|v| *v = v.max(floor));
    Ok(MsePredictor { eigenvalues, eigenvectors, test_train: test_train.cloned(), y: y.clone(), lr })
}

impl MsePredictor {
    /// `e^{−ηλt}` and `(1 − e^{−ηλt})/λ` per eigenmode. `t = ∞` drops the exponential.
    fn factors(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        if t < 0.0 || t.is_nan() {
            return Err(Error::NegativeTime(t));
        }
        let decay = self.eigenvalues.map(|l| if t.is_infinite() { 0.0 } else { (-self.lr * l * t).exp() });
        let gain = self.eigenvalues.map(|l| if t.is_infinite() { 1.0 / l } else { -(-self.lr * l * t).exp_m1() / l });
        Ok((decay, gain))
    }

    /// `V diag(d) Vᵀ m`.
    fn apply(&self, d: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut proj = self.eigenvectors.transpose() * m;
        for (i, mut row) in proj.row_iter_mut().enumerate() {
            row *= d[i];
        }
        &self.eigenvectors * proj
    }

    /// Predictions at time `t` from initial outputs (zero when `None`).
    pub fn predict(
        &self,
        t: f64,
        f0_train: Option<&DMatrix<f64>>,
        f0_test: Option<&DMatrix<f64>>,
    ) -> Result<Prediction> {
        let (decay, gain) = self.factors(t)?;
        let zeros = DMatrix::zeros(self.y.nrows(), self.y.ncols());
        let f0 = f0_train.unwrap_or(&zeros);
        if t == 0.0 {
            let test = self
                .test_train
                .as_ref()
                .map(|c| f0_test.cloned().unwrap_or_else(|| DMatrix::zeros(c.nrows(), self.y.ncols())));
            return Ok(Prediction { train: f0.clone(), test });
        }
        let train = &self.y + self.apply(&decay, &(f0 - &self.y));
        let test = self.test_train.as_ref().map(|c| {
            let delta = c * self.apply(&gain, &(&self.y - f0));
            match f0_test {
                Some(f) => f + delta,
                None => delta,
            }
        });
        Ok(Prediction { train, test })
    }

    /// `A_t = Θ_* Θ⁻¹(I − e^{−ηΘt})` (test rows) and `E_t = e^{−ηΘt}`.
    pub(crate) fn operators(&self, t: f64) -> Result<(Option<DMatrix<f64>>, DMatrix<f64>)> {
        let (decay, gain) = self.factors(t)?;
        let n = self.y.nrows();
        let id = DMatrix::identity(n, n);
        let e = self.apply(&decay, &id);
        let a = self.test_train.as_ref().map(|c| c * self.apply(&gain, &id));
        Ok((a, e))
    }
}

/// Mean and covariance of infinitely wide networks trained for time `t`
/// from random initialization `f_0 ~ GP(0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub train_mean: DMatrix<f64>,
    pub train_cov: DMatrix<f64>,
    pub test_mean: DMatrix<f64>,
    pub test_cov: DMatrix<f64>,
}

impl EnsemblePrediction {
    /// Expected `½·mean((f − y)²)` over the ensemble, per set.
    pub fn expected_loss(mean: &DMatrix<f64>, cov: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let classes = y.ncols() as f64;
        0.5 * ((mean - y).norm_squared() + classes * cov.trace()) / y.len() as f64
    }
}

/// Closed-form gradient flow with its covariance over initializations.
#[derive(Clone, Debug)]
pub struct EnsemblePredictor {
    mse: MsePredictor,
    k_train: DMatrix<f64>,
    k_test_train: DMatrix<f64>,
    k_test: DMatrix<f64>,
}

/// Needs both kernels for train, test-train and test-test pairs.
pub fn gradient_descent_mse_ensemble(
    train: &Kernel,
    test_train: &Kernel,
    test: &Kernel,
    y: &DMatrix<f64>,
    lr: f64,
    diag_reg: f64,
) -> Result<EnsemblePredictor> {
    let theta = pick(train, Mode::Ntk, "train")?;
    let theta_x = pick(test_train, Mode::Ntk, "test-train")?;
    Ok(EnsemblePredictor {
        mse: gradient_descent_mse(theta, y, Some(theta_x), lr, diag_reg)?,
        k_train: train.nngp.clone(),
        k_test_train: test_train.nngp.clone(),
        k_test: test.nngp.clone(),
    })
}

impl EnsemblePredictor {
    pub fn predict(&self, t: f64) -> Result<EnsemblePrediction> {
        let (a, e) = self.mse.operators(t)?;
        let a = a.expect("ensemble predictor has a cross kernel");
        let y = &self.mse.y;
        let n = y.nrows();
        let train_mean = (DMatrix::identity(n, n) - &e) * y;
        let train_cov = &e * &self.k_train * e.transpose();
        let test_mean = &a * y;
        let akx = &a * self.k_test_train.transpose();
        let test_cov = &self.k_test + &a * &self.k_train * a.transpose() - &akx - akx.transpose();
        Ok(EnsemblePrediction { train_mean, train_cov, test_mean, test_cov })
    }
}

#[cfg(test)]
mod tests;
