//! Kernels and approximations measured on finite networks.
//!
//! * [`empirical_ntk`]: `Θ = J Jᵀ` of one network from exact per-example
//!   gradients.
//! * [`MonteCarloKernel`]: averages of finite-width kernels over random
//!   initializations, with standard errors.
//! * [`taylor_expand`] and [`linearize`]: the network replaced by its
//!   truncated Taylor series in the weights around an initialization.

mod taylor;

pub use taylor::{linearize, taylor_expand, TaylorModel};

use nalgebra::DMatrix;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::finite::{FiniteNet, ParamTree, Tape};
use crate::kernel::{conform, Get, Kernel, KernelFunction};
use crate::linalg::gemm;
use crate::netspec::{NetSpec, Op};
use crate::rng::RngKey;

/// Exact empirical NTK `⟨∇θ f(x1_i), ∇θ f(x2_j)⟩` of a network with one output.
pub fn empirical_ntk(net: &FiniteNet, params: &ParamTree, x1: &Batch, x2: Option<&Batch>) -> Result<DMatrix<f64>> {
    let x = union(net, x1, x2)?;
    let tape = net.forward(params, &x, None)?;
    let full = ntk_from_tape(net, params, &tape)?;
    Ok(cross_block(&full, x1.len(), x2.map(Batch::len)))
}

fn union(net: &FiniteNet, x1: &Batch, x2: Option<&Batch>) -> Result<Batch> {
    if net.output_dim() != 1 {
        return Err(Error::Unsupported(format!(
            "empirical NTK needs a single output, network has {}; use NetSpec::with_readout_width(1)",
            net.output_dim()
        )));
    }
    let shape = net.spec().input_shape;
    let a = conform(x1, shape)?.into_owned();
    match x2 {
        Some(x2) => a.concat(conform(x2, shape)?.as_ref()),
        None => Ok(a),
    }
}

/// Rows `0..n1` against rows `n1..` of a union-batch kernel, or the whole
/// matrix when there is no second batch.
fn cross_block(full: &DMatrix<f64>, n1: usize, n2: Option<usize>) -> DMatrix<f64> {
    match n2 {
        Some(n2) => full.view((0, n1), (n1, n2)).into_owned(),
        None => full.clone(),
    }
}

/// `J Jᵀ` over the tape's batch. Every example's output is a scalar and
/// examples never interact, so one reverse pass with unit cotangents gives
/// each example's gradient in its own rows.
fn ntk_from_tape(net: &FiniteNet, params: &ParamTree, tape: &Tape) -> Result<DMatrix<f64>> {
    let n = tape.n;
    let mut theta = vec![0.0; n * n];
    let ones = vec![1.0; n];
    net.backward(params, tape, &ones, &mut |site| {
        let fan = params.layers[site.param].fan_in;
        let cout = params.layers[site.param].fan_out;
        let r = site.rows_per_example;
        let (s2, b2) = (site.w_scale * site.w_scale, site.b_std * site.b_std);
        if r == 1 {
            let mut xx = vec![0.0; n * n];
            let mut gg = vec![0.0; n * n];
            gemm(n, fan, n, 1.0, site.input, false, site.input, true, 0.0, &mut xx);
            gemm(n, cout, n, 1.0, site.cotangent, false, site.cotangent, true, 0.0, &mut gg);
            for ((t, x), g) in theta.iter_mut().zip(&xx).zip(&gg) {
                *t += s2 * x * g + b2 * g;
            }
            return;
        }
        let explicit = n * r * fan * cout + n * n * fan * cout;
        let pairwise = n * n * r * r * (fan + cout);
        if explicit <= pairwise {
            // Per-example weight gradients J_i = s·X_iᵀ G_i, then their Gram matrix.
            let width = fan * cout;
            let mut jac = vec![0.0; n * width];
            let mut bias = vec![0.0; n * cout];
            for i in 0..n {
                let xi = &site.input[i * r * fan..(i + 1) * r * fan];
                let gi = &site.cotangent[i * r * cout..(i + 1) * r * cout];
                gemm(fan, r, cout, site.w_scale, xi, true, gi, false, 0.0, &mut jac[i * width..(i + 1) * width]);
                for row in gi.chunks_exact(cout) {
                    for (b, v) in bias[i * cout..(i + 1) * cout].iter_mut().zip(row) {
                        *b += v;
                    }
                }
            }
            gemm(n, width, n, 1.0, &jac, false, &jac, true, 1.0, &mut theta);
            gemm(n, cout, n, b2, &bias, false, &bias, true, 1.0, &mut theta);
        } else {
            let m = n * r;
            let mut xx = vec![0.0; m * m];
            let mut gg = vec![0.0; m * m];
            gemm(m, fan, m, 1.0, site.input, false, site.input, true, 0.0, &mut xx);
            gemm(m, cout, m, 1.0, site.cotangent, false, site.cotangent, true, 0.0, &mut gg);
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..r {
                        let row = (i * r + p) * m + j * r;
                        for q in 0..r {
                            let e = row + q;
                            acc += (s2 * xx[e] + b2) * gg[e];
                        }
                    }
                    theta[i * n + j] += acc;
                }
            }
        }
    })?;
    let mut m = DMatrix::from_row_slice(n, n, &theta);
    crate::linalg::symmetrize(&mut m);
    Ok(m)
}

/// NNGP of one draw: the readout's own kernel of its input,
/// `σw²⟨y_i, y_j⟩/fan_in + σb²`, or `⟨f_i, f_j⟩/dim` without a Dense readout.
fn nngp_from_tape(net: &FiniteNet, tape: &Tape) -> DMatrix<f64> {
    let g = net.graph();
    let n = tape.n;
    let (y, dim, w2, b2) = match g.nodes[g.output].op {
        Op::Dense { fan_in, w_std, b_std, .. } if !g.nodes[g.output].shape.spatial => {
            let src = g.nodes[g.output].inputs[0];
            (&tape.acts[src], fan_in, w_std * w_std, b_std * b_std)
        }
        _ => (&tape.acts[g.output], g.nodes[g.output].shape.dim(), 1.0, 0.0),
    };
    let mut k = vec![0.0; n * n];
    gemm(n, dim, n, w2 / dim as f64, y, false, y, true, 0.0, &mut k);
    let mut m = DMatrix::from_row_slice(n, n, &k);
    m.add_scalar_mut(b2);
    crate::linalg::symmetrize(&mut m);
    m
}

/// Monte Carlo kernel estimate with elementwise standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub nngp: DMatrix<f64>,
    pub ntk: Option<DMatrix<f64>>,
    pub nngp_se: DMatrix<f64>,
    pub ntk_se: Option<DMatrix<f64>>,
    pub n_samples: usize,
}

/// Streaming mean and sum of squared deviations.
#[derive(Clone, Debug)]
struct Welford {
    count: usize,
    mean: DMatrix<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(rows: usize, cols: usize) -> Welford {
        Welford { count: 0, mean: DMatrix::zeros(rows, cols), m2: DMatrix::zeros(rows, cols) }
    }

    fn push(&mut self, x: &DMatrix<f64>) {
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x.iter()) {
            let d = v - *m;
            *m += d * inv;
            *s += d * (v - *m);
        }
    }

    fn standard_error(&self) -> DMatrix<f64> {
        let n = self.count as f64;
        if self.count < 2 {
            return DMatrix::zeros(self.mean.nrows(), self.mean.ncols());
        }
        self.m2.map(|s| (s / (n - 1.0) / n).sqrt())
    }
}

/// Averages finite-width kernels over `n_samples` random initializations.
///
/// The NNGP of a draw is the readout's kernel of its penultimate activations;
/// the NTK is the empirical NTK with a single readout unit. Draw `s` uses
/// `key.fold_in(s)`, so estimates are reproducible and nested: the first `m`
/// draws of a larger run are exactly an `m`-sample run. Networks with
/// dropout sample one mask per example and draw.
#[derive(Clone, Debug)]
pub struct MonteCarloKernel {
    net: FiniteNet,
    key: RngKey,
    n_samples: usize,
}

impl MonteCarloKernel {
    pub fn new(spec: &NetSpec, key: RngKey, n_samples: usize) -> Result<MonteCarloKernel> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        let spec = match spec.with_readout_width(1) {
            Ok(s) => s,
            Err(_) if spec.output_dim()? == 1 => spec.clone(),
            Err(e) => return Err(e),
        };
        Ok(MonteCarloKernel { net: FiniteNet::new(&spec)?, key, n_samples })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn estimate(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<McEstimate> {
        Ok(self.estimate_prefixes(x1, x2, get, &[self.n_samples])?.remove(0))
    }

    /// Estimates after the first `counts[k]` draws, from one pass over the
    /// largest count.
    pub fn estimate_prefixes(
        &self,
        x1: &Batch,
        x2: Option<&Batch>,
        get: Get,
        counts: &[usize],
    ) -> Result<Vec<McEstimate>> {
        let x = union(&self.net, x1, x2)?;
        let (n1, n2) = (x1.len(), x2.map(Batch::len));
        let cols = n2.unwrap_or(n1);
        let total = counts.iter().copied().max().unwrap_or(0);
        let dropout = self.net.spec().has_dropout();
        let mut acc_k = Welford::new(n1, cols);
        let mut acc_t = Welford::new(n1, cols);
        let mut out = Vec::new();

        let draw = |s: usize| -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
            let key = self.key.fold_in(s as u64);
            let params = self.net.init_params(key.fold_in(0));
            let tape = self.net.forward(&params, &x, dropout.then(|| key.fold_in(1)))?;
            let k = cross_block(&nngp_from_tape(&self.net, &tape), n1, n2);
            let t = if get.wants_ntk() {
                Some(cross_block(&ntk_from_tape(&self.net, &params, &tape)?, n1, n2))
            } else {
                None
            };
            Ok((k, t))
        };

        // Draws run in parallel chunks but are folded in index order, so the
        // result does not depend on the thread count.
        let chunk = rayon::current_num_threads().max(1);
        let mut s = 0;
        while s < total {
            let end = (s + chunk).min(total);
            let results: Vec<Result<_>> = {
                use rayon::prelude::*;
                (s..end).into_par_iter().map(draw).collect()
            };
            for (idx, r) in (s..end).zip(results) {
                let (k, t) = r?;
                acc_k.push(&k);
                if let Some(t) = &t {
                    acc_t.push(t);
                }
                let done = idx + 1;
                for _ in counts.iter().filter(|&&c| c == done) {
                    out.push((done, self.snapshot(&acc_k, &acc_t, get)));
                }
            }
            s = end;
        }
        // Restore the caller's order.
        let mut ordered = Vec::with_capacity(counts.len());
        for &c in counts {
            if c == 0 {
                return Err(Error::InvalidArgument("sample counts must be positive".into()));
            }
            let pos = out.iter().position(|(d, _)| *d == c).expect("every count is reached");
            ordered.push(out.remove(pos).1);
        }
        Ok(ordered)
    }

    fn snapshot(&self, k: &Welford, t: &Welford, get: Get) -> McEstimate {
        McEstimate {
            nngp: k.mean.clone(),
            nngp_se: k.standard_error(),
            ntk: get.wants_ntk().then(|| t.mean.clone()),
            ntk_se: get.wants_ntk().then(|| t.standard_error()),
            n_samples: k.count,
        }
    }
}

impl KernelFunction for MonteCarloKernel {
    fn compute(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<Kernel> {
        let e = self.estimate(x1, x2, get)?;
        Ok(Kernel { nngp: e.nngp, ntk: e.ntk })
    }
}

/// `‖A − B‖²_F / ‖A‖²_F`.
pub fn relative_frobenius_sq(reference: &DMatrix<f64>, estimate: &DMatrix<f64>) -> f64 {
    (reference - estimate).norm_squared() / reference.norm_squared()
}
