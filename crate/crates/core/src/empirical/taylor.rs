use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::finite::{FiniteNet, ParamTree, Trainable};
use crate::netspec::NetSpec;

/// The network replaced by its Taylor polynomial in the weights:
/// `f(θ) ≈ Σ_{k ≤ order} c_k(θ − θ0)` where `c_k` are the jet coefficients
/// along `δ = θ − θ0` (so `c_1` is `J δ` and `c_2` is `½ δᵀ H δ`).
#[derive(Clone, Debug)]
pub struct TaylorModel {
    net: FiniteNet,
    params0: ParamTree,
    order: usize,
}

impl TaylorModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn params0(&self) -> &ParamTree {
        &self.params0
    }

    pub fn net(&self) -> &FiniteNet {
        &self.net
    }

    pub fn apply(&self, params: &ParamTree, x: &Batch) -> Result<Vec<f64>> {
        let delta = params.sub(&self.params0);
        Ok(self.net.jet_apply(&self.params0, &delta, x, self.order)?.evaluate(1.0))
    }
}

impl Trainable for TaylorModel {
    fn predict(&self, params: &ParamTree, x: &Batch) -> Result<Vec<f64>> {
        self.apply(params, x)
    }

    fn vjp(&self, params: &ParamTree, x: &Batch, cotangent: &[f64]) -> Result<ParamTree> {
        let delta = params.sub(&self.params0);
        let tape = self.net.jet_forward(&self.params0, &delta, x, self.order)?;
        Ok(self.net.jet_backward(&self.params0, &delta, &tape, cotangent))
    }
}

/// Taylor expansion of `spec` around `params0` to `order ∈ {0, 1, 2}`.
pub fn taylor_expand(spec: &NetSpec, params0: &ParamTree, order: usize) -> Result<TaylorModel> {
    if order > 2 {
        return Err(Error::Unsupported(format!("Taylor order {order}; at most 2 is supported")));
    }
    let net = FiniteNet::new(spec)?;
    net.check_params(params0)?;
    Ok(TaylorModel { net, params0: params0.clone(), order })
}

/// First-order expansion.
pub fn linearize(spec: &NetSpec, params0: &ParamTree) -> Result<TaylorModel> {
    taylor_expand(spec, params0, 1)
}
