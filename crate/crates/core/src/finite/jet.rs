//! Second-order Taylor propagation along a parameter direction.
//!
//! A jet holds the Taylor coefficients `c_k` of `t ↦ f(θ0 + t·δ)`, so that
//! `f(θ0 + t·δ) ≈ Σ_k c_k t^k`. Each layer maps input coefficients to output
//! coefficients: affine layers by the product rule, `φ` by
//! `c1 = φ'·z1`, `c2 = φ'·z2 + ½φ''·z1²`.

use super::{ops, FiniteNet, ParamTree};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::kernel::conform;
use crate::linalg::gemm;
use crate::netspec::Op;

/// Taylor coefficients of the network output, lowest order first.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub coefficients: Vec<Batch>,
}

impl Jet {
    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// `Σ_k c_k t^k` as a flat vector.
    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.coefficients[0].data().len()];
        let mut tk = 1.0;
        for c in &self.coefficients {
            for (o, v) in out.iter_mut().zip(c.data()) {
                *o += tk * v;
            }
            tk *= t;
        }
        out
    }
}

/// Per-node coefficient activations.
pub(crate) struct JetTape {
    pub n: usize,
    pub order: usize,
    pub coeffs: Vec<Vec<Vec<f64>>>,
}

impl JetTape {
    pub fn output(&self, net: &FiniteNet) -> &[Vec<f64>] {
        &self.coeffs[net.graph.output]
    }
}

impl FiniteNet {
    /// Taylor coefficients of `t ↦ apply(params0 + t·direction, x)` up to `order ≤ 2`.
    pub fn jet_apply(&self, params0: &ParamTree, direction: &ParamTree, x: &Batch, order: usize) -> Result<Jet> {
        let tape = self.jet_forward(params0, direction, x, order)?;
        let n = tape.n;
        let coefficients = tape.output(self).iter().map(|c| self.output_batch(n, c.clone())).collect();
        Ok(Jet { coefficients })
    }

    pub(crate) fn jet_forward(
        &self,
        params0: &ParamTree,
        direction: &ParamTree,
        x: &Batch,
        order: usize,
    ) -> Result<JetTape> {
        if order > 2 {
            return Err(Error::Unsupported(format!("Taylor order {order}; at most 2 is supported")));
        }
        self.check_params(params0)?;
        self.check_params(direction)?;
        let x = conform(x, self.spec.input_shape)?;
        let n = x.len();
        let g = &self.graph;
        let mut coeffs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(g.nodes.len());
        for node in &g.nodes {
            let input = |i: usize| -> &Vec<Vec<f64>> { &coeffs[node.inputs[i]] };
            let inshape = |i: usize| g.nodes[node.inputs[i]].shape;
            let linear = |f: &dyn Fn(&[f64]) -> Vec<f64>| input(0).iter().map(|c| f(c)).collect::<Vec<_>>();
            let out: Vec<Vec<f64>> = match &node.op {
                Op::Input => {
                    let mut v = vec![x.data().to_vec()];
                    for _ in 0..order {
                        v.push(vec![0.0; x.data().len()]);
                    }
                    v
                }
                Op::Dense { param, fan_in, width, w_std, b_std } => {
                    let rows = n * inshape(0).pixels();
                    let s = w_std / (*fan_in as f64).sqrt();
                    affine_jet(
                        input(0),
                        rows,
                        *fan_in,
                        *width,
                        s,
                        *b_std,
                        &params0.layers[*param],
                        &direction.layers[*param],
                    )
                }
                Op::Conv { param, geom, cin, cout, w_std, b_std } => {
                    let cols: Vec<Vec<f64>> = input(0).iter().map(|c| ops::im2col(c, n, geom, *cin)).collect();
                    let (rows, fan) = (n * geom.out_pixels(), geom.window() * cin);
                    let s = w_std / (fan as f64).sqrt();
                    affine_jet(&cols, rows, fan, *cout, s, *b_std, &params0.layers[*param], &direction.layers[*param])
                }
                Op::Phi(phi) => {
                    let z = input(0);
                    let mut out = vec![z[0].iter().map(|&v| ops::phi(*phi, v)).collect::<Vec<f64>>()];
                    if order >= 1 {
                        out.push(z[0].iter().zip(&z[1]).map(|(&z0, &z1)| ops::phi_d1(*phi, z0) * z1).collect());
                    }
                    if order >= 2 {
                        out.push(
                            (0..z[0].len())
                                .map(|e| {
                                    let z0 = z[0][e];
                                    ops::phi_d1(*phi, z0) * z[2][e] + 0.5 * ops::phi_d2(*phi, z0) * z[1][e] * z[1][e]
                                })
                                .collect(),
                        );
                    }
                    out
                }
                Op::Flatten | Op::Dropout { .. } => input(0).clone(),
                Op::AvgPool(geom) => linear(&|c| ops::avg_pool(c, n, geom, inshape(0).c)),
                Op::GlobalAvgPool => linear(&|c| ops::global_avg_pool(c, n, inshape(0).pixels(), inshape(0).c)),
                Op::Sum => {
                    let mut out = input(0).clone();
                    for i in 1..node.inputs.len() {
                        for (o, c) in out.iter_mut().zip(input(i)) {
                            ops::add_into(o, c);
                        }
                    }
                    out
                }
            };
            coeffs.push(out);
        }
        Ok(JetTape { n, order, coeffs })
    }

    /// Gradient with respect to the direction of `Σ_{k≥1} ⟨cotangent, c_k⟩`.
    pub(crate) fn jet_backward(
        &self,
        params0: &ParamTree,
        direction: &ParamTree,
        tape: &JetTape,
        cotangent: &[f64],
    ) -> ParamTree {
        let g = &self.graph;
        let (n, order) = (tape.n, tape.order);
        let mut grad = direction.zeros_like();
        if order == 0 {
            return grad;
        }
        // cots[node][k - 1] is the cotangent of coefficient k.
        let mut cots: Vec<Option<Vec<Vec<f64>>>> = vec![None; g.nodes.len()];
        cots[g.output] = Some(vec![cotangent.to_vec(); order]);
        let push = |cots: &mut Vec<Option<Vec<Vec<f64>>>>, i: usize, v: Vec<Vec<f64>>| match &mut cots[i] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&v) {
                    ops::add_into(a, b);
                }
            }
            slot @ None => *slot = Some(v),
        };
        for id in (0..g.nodes.len()).rev() {
            let Some(gout) = cots[id].take() else { continue };
            let node = &g.nodes[id];
            let src = node.inputs.first().copied().unwrap_or(0);
            let wants = !node.inputs.is_empty() && !matches!(g.nodes[src].op, Op::Input);
            match &node.op {
                Op::Input => {}
                Op::Dense { param, fan_in, width, w_std, .. } => {
                    let rows = n * g.nodes[src].shape.pixels();
                    let s = w_std / (*fan_in as f64).sqrt();
                    let gin = affine_jet_backward(
                        &tape.coeffs[src],
                        &gout,
                        rows,
                        *fan_in,
                        *width,
                        s,
                        &self.b_std(id),
                        &params0.layers[*param],
                        &direction.layers[*param],
                        &mut grad.layers[*param],
                        wants,
                    );
                    if wants {
                        push(&mut cots, src, gin);
                    }
                }
                Op::Conv { param, geom, cin, cout, w_std, .. } => {
                    let cols: Vec<Vec<f64>> = tape.coeffs[src].iter().map(|c| ops::im2col(c, n, geom, *cin)).collect();
                    let (rows, fan) = (n * geom.out_pixels(), geom.window() * cin);
                    let s = w_std / (fan as f64).sqrt();
                    let gcols = affine_jet_backward(
                        &cols,
                        &gout,
                        rows,
                        fan,
                        *cout,
                        s,
                        &self.b_std(id),
                        &params0.layers[*param],
                        &direction.layers[*param],
                        &mut grad.layers[*param],
                        wants,
                    );
                    if wants {
                        let len = tape.coeffs[src][0].len();
                        let gin = gcols
                            .iter()
                            .map(|gc| {
                                let mut v = vec![0.0; len];
                                ops::col2im_add(gc, n, geom, *cin, &mut v);
                                v
                            })
                            .collect();
                        push(&mut cots, src, gin);
                    }
                }
                Op::Phi(phi) => {
                    let z = &tape.coeffs[src];
                    let len = z[0].len();
                    let mut g1 = vec![0.0; len];
                    for e in 0..len {
                        let mut v = ops::phi_d1(*phi, z[0][e]) * gout[0][e];
                        if order >= 2 {
                            v += ops::phi_d2(*phi, z[0][e]) * z[1][e] * gout[1][e];
                        }
                        g1[e] = v;
                    }
                    let mut gin = vec![g1];
                    if order >= 2 {
                        gin.push((0..len).map(|e| ops::phi_d1(*phi, z[0][e]) * gout[1][e]).collect());
                    }
                    push(&mut cots, src, gin);
                }
                Op::Flatten | Op::Dropout { .. } => push(&mut cots, src, gout),
                Op::AvgPool(geom) => {
                    let len = tape.coeffs[src][0].len();
                    let c = g.nodes[src].shape.c;
                    let gin = gout
                        .iter()
                        .map(|gk| {
                            let mut v = vec![0.0; len];
                            ops::avg_pool_adjoint_add(gk, n, geom, c, &mut v);
                            v
                        })
                        .collect();
                    push(&mut cots, src, gin);
                }
                Op::GlobalAvgPool => {
                    let len = tape.coeffs[src][0].len();
                    let s = g.nodes[src].shape;
                    let gin = gout
                        .iter()
                        .map(|gk| {
                            let mut v = vec![0.0; len];
                            ops::global_avg_pool_adjoint_add(gk, n, s.pixels(), s.c, &mut v);
                            v
                        })
                        .collect();
                    push(&mut cots, src, gin);
                }
                Op::Sum => {
                    for &i in &node.inputs {
                        push(&mut cots, i, gout.clone());
                    }
                }
            }
        }
        grad
    }

    fn b_std(&self, id: usize) -> f64 {
        match self.graph.nodes[id].op {
            Op::Dense { b_std, .. } | Op::Conv { b_std, .. } => b_std,
            _ => 0.0,
        }
    }
}

/// `h_k = s(y_k W0 + y_{k−1} D)` plus `σb β0` at order 0 and `σb dβ` at order 1.
#[allow(clippy::too_many_arguments)]
fn affine_jet(
    y: &[Vec<f64>],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    s: f64,
    b_std: f64,
    p0: &super::AffineParams,
    d: &super::AffineParams,
) -> Vec<Vec<f64>> {
    (0..y.len())
        .map(|k| {
            let mut out = vec![0.0; rows * fan_out];
            gemm(rows, fan_in, fan_out, s, &y[k], false, &p0.w, false, 0.0, &mut out);
            if k >= 1 {
                gemm(rows, fan_in, fan_out, s, &y[k - 1], false, &d.w, false, 1.0, &mut out);
            }
            match k {
                0 => ops::add_bias(&mut out, &p0.b, b_std),
                1 => ops::add_bias(&mut out, &d.b, b_std),
                _ => {}
            }
            out
        })
        .collect()
}

/// Reverse of [`affine_jet`] with respect to `D`, `dβ` and `y_1, y_2`.
/// Returns the input cotangents (orders 1..) when `wants_input`.
#[allow(clippy::too_many_arguments)]
fn affine_jet_backward(
    y: &[Vec<f64>],
    gout: &[Vec<f64>],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    s: f64,
    b_std: &f64,
    p0: &super::AffineParams,
    d: &super::AffineParams,
    grad: &mut super::AffineParams,
    wants_input: bool,
) -> Vec<Vec<f64>> {
    let order = gout.len();
    // ∂D = s Σ_k y_{k−1}ᵀ g_k
    for k in 1..=order {
        gemm(fan_in, rows, fan_out, s, &y[k - 1], true, &gout[k - 1], false, 1.0, &mut grad.w);
    }
    if *b_std != 0.0 {
        for (b, v) in grad.b.iter_mut().zip(ops::col_sums(&gout[0], fan_out)) {
            *b += b_std * v;
        }
    }
    if !wants_input {
        return Vec::new();
    }
    // ∂y_k = s(g_k W0ᵀ + g_{k+1} Dᵀ)
    (1..=order)
        .map(|k| {
            let mut gin = vec![0.0; rows * fan_in];
            gemm(rows, fan_out, fan_in, s, &gout[k - 1], false, &p0.w, true, 0.0, &mut gin);
            if k < order {
                gemm(rows, fan_out, fan_in, s, &gout[k], false, &d.w, true, 1.0, &mut gin);
            }
            gin
        })
        .collect()
}
