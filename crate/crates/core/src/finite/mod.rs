//! Finite-width networks in the NTK parameterization.
//!
//! A dense layer computes `σw/√fan_in · W y + σb β` with `W`, `β` standard
//! normal; convolutions do the same per output pixel with `fan_in` running
//! over the filter window and input channels. [`FiniteNet`] executes the
//! graph compiled from a [`NetSpec`]: forward evaluation, reverse-mode
//! parameter gradients, and second-order Taylor jets along a parameter
//! direction. [`train`] runs full-batch gradient descent on the squared loss.
//!
//! ```
//! use tangent_kernels::{finite::FiniteNet, netspec::zoo, Batch, Phi, RngKey};
//!
//! let net = FiniteNet::new(&zoo::mlp(3, 64, 2, Phi::Erf, 1.0, 0.1, 1)).unwrap();
//! let params = net.init_params(RngKey::new(0));
//! let x = Batch::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
//! let y = net.apply(&params, &x).unwrap();
//! assert_eq!(y.len(), 1);
//! ```

mod jet;
pub(crate) mod ops;
mod params;
mod train;

pub use jet::Jet;
pub use params::{AffineParams, ParamTree};
pub use train::{train, Loss, Optimizer, TrainConfig, TrainRecord, Trainable};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::kernel::conform;
use crate::linalg::gemm;
use crate::netspec::{Graph, NetSpec, Op};
use crate::rng::RngKey;

/// A compiled finite network.
#[derive(Clone, Debug)]
pub struct FiniteNet {
    spec: NetSpec,
    graph: Graph,
}

/// Activations of every node from one forward pass.
pub(crate) struct Tape {
    pub n: usize,
    pub acts: Vec<Vec<f64>>,
    /// Scaled keep masks of dropout nodes, when sampled.
    pub masks: Vec<Option<Vec<f64>>>,
}

/// What the reverse pass reports at each affine node: the layer input (or
/// its patch matrix, for convolutions) as a `rows × fan_in` matrix, and the
/// cotangent of the layer output as `rows × fan_out`. Rows run over
/// examples, then output pixels.
pub(crate) struct AffineSite<'a> {
    pub param: usize,
    pub input: &'a [f64],
    pub cotangent: &'a [f64],
    pub rows_per_example: usize,
    pub w_scale: f64,
    pub b_std: f64,
}

impl FiniteNet {
    pub fn new(spec: &NetSpec) -> Result<FiniteNet> {
        Ok(FiniteNet { spec: spec.clone(), graph: spec.compile()? })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub(crate) fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Values in one output example.
    pub fn output_dim(&self) -> usize {
        self.graph.nodes[self.graph.output].shape.dim()
    }

    /// Standard-normal weights and biases; layer `k` draws from `key.fold_in(k)`.
    pub fn init_params(&self, key: RngKey) -> ParamTree {
        let mut layers = Vec::new();
        for node in &self.graph.nodes {
            let (param, fan_in, fan_out) = match node.op {
                Op::Dense { param, fan_in, width, .. } => (param, fan_in, width),
                Op::Conv { param, geom, cin, cout, .. } => (param, geom.window() * cin, cout),
                _ => continue,
            };
            debug_assert_eq!(param, layers.len());
            layers.push(AffineParams::standard_normal(&node.path, fan_in, fan_out, key.fold_in(param as u64)));
        }
        ParamTree { layers }
    }

    /// Errors unless `params` has this network's layer shapes.
    pub fn check_params(&self, params: &ParamTree) -> Result<()> {
        let mut k = 0;
        for node in &self.graph.nodes {
            let (fan_in, fan_out) = match node.op {
                Op::Dense { fan_in, width, .. } => (fan_in, width),
                Op::Conv { geom, cin, cout, .. } => (geom.window() * cin, cout),
                _ => continue,
            };
            let ok = params.layers.get(k).is_some_and(|l| {
                l.fan_in == fan_in && l.fan_out == fan_out && l.w.len() == fan_in * fan_out && l.b.len() == fan_out
            });
            if !ok {
                return Err(Error::Shape(format!("parameters for layer {} do not match the network", node.path)));
            }
            k += 1;
        }
        if k != params.layers.len() {
            return Err(Error::Shape(format!(
                "network has {k} affine layers, parameters have {}",
                params.layers.len()
            )));
        }
        Ok(())
    }

    fn output_batch(&self, n: usize, data: Vec<f64>) -> Batch {
        let s = self.graph.nodes[self.graph.output].shape;
        if s.spatial {
            Batch::with_shape(n, s.h, s.w, s.c, data)
        } else {
            Batch::with_shape(n, 1, 1, s.c, data)
        }
    }

    /// Forward pass. Dropout is the identity.
    pub fn apply(&self, params: &ParamTree, x: &Batch) -> Result<Batch> {
        let mut tape = self.forward(params, x, None)?;
        let out = std::mem::take(&mut tape.acts[self.graph.output]);
        Ok(self.output_batch(x.len(), out))
    }

    /// Forward pass with dropout masks drawn from `key`.
    pub fn apply_sampled(&self, params: &ParamTree, x: &Batch, key: RngKey) -> Result<Batch> {
        let mut tape = self.forward(params, x, Some(key))?;
        let out = std::mem::take(&mut tape.acts[self.graph.output]);
        Ok(self.output_batch(x.len(), out))
    }

    /// Gradient of `⟨cotangent, apply(params, x)⟩` with respect to every parameter.
    pub fn grad_params(&self, params: &ParamTree, x: &Batch, cotangent: &[f64]) -> Result<ParamTree> {
        let tape = self.forward(params, x, None)?;
        let mut grad = params.zeros_like();
        self.backward(params, &tape, cotangent, &mut |site| accumulate_grad(&mut grad, &site))?;
        Ok(grad)
    }

    /// Outputs from one forward pass, with the gradient for the cotangent
    /// `cot(outputs)` overwriting `grad`, a tree shaped like `params`.
    pub fn value_and_grad_into(
        &self,
        params: &ParamTree,
        x: &Batch,
        cot: &dyn Fn(&[f64]) -> Vec<f64>,
        grad: &mut ParamTree,
    ) -> Result<Vec<f64>> {
        self.check_params(grad)?;
        let tape = self.forward(params, x, None)?;
        let out = tape.acts[self.graph.output].clone();
        grad.set_zero();
        self.backward(params, &tape, &cot(&out), &mut |site| accumulate_grad(grad, &site))?;
        Ok(out)
    }

    /// [`FiniteNet::grad_params`] through the dropout masks drawn from `key`,
    /// the same masks [`FiniteNet::apply_sampled`] uses.
    pub fn grad_params_sampled(
        &self,
        params: &ParamTree,
        x: &Batch,
        cotangent: &[f64],
        key: RngKey,
    ) -> Result<ParamTree> {
        let tape = self.forward(params, x, Some(key))?;
        let mut grad = params.zeros_like();
        self.backward(params, &tape, cotangent, &mut |site| accumulate_grad(&mut grad, &site))?;
        Ok(grad)
    }

    pub(crate) fn forward(&self, params: &ParamTree, x: &Batch, dropout: Option<RngKey>) -> Result<Tape> {
        self.check_params(params)?;
        let x = conform(x, self.spec.input_shape)?;
        let n = x.len();
        let g = &self.graph;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(g.nodes.len());
        let mut masks = vec![None; g.nodes.len()];
        for (id, node) in g.nodes.iter().enumerate() {
            let input = |k: usize| -> &[f64] { &acts[node.inputs[k]] };
            let inshape = |k: usize| g.nodes[node.inputs[k]].shape;
            let out = match &node.op {
                Op::Input => x.data().to_vec(),
                Op::Dense { param, fan_in, width, w_std, b_std } => {
                    let p = &params.layers[*param];
                    let rows = n * inshape(0).pixels();
                    let mut out = vec![0.0; rows * width];
                    gemm(
                        rows,
                        *fan_in,
                        *width,
                        w_std / (*fan_in as f64).sqrt(),
                        input(0),
                        false,
                        &p.w,
                        false,
                        0.0,
                        &mut out,
                    );
                    ops::add_bias(&mut out, &p.b, *b_std);
                    out
                }
                Op::Conv { param, geom, cin, cout, w_std, b_std } => {
                    let p = &params.layers[*param];
                    let cols = ops::im2col(input(0), n, geom, *cin);
                    let (rows, fan) = (n * geom.out_pixels(), geom.window() * cin);
                    let mut out = vec![0.0; rows * cout];
                    gemm(rows, fan, *cout, w_std / (fan as f64).sqrt(), &cols, false, &p.w, false, 0.0, &mut out);
                    ops::add_bias(&mut out, &p.b, *b_std);
                    out
                }
                Op::Phi(phi) => input(0).iter().map(|&z| ops::phi(*phi, z)).collect(),
                Op::Flatten => input(0).to_vec(),
                Op::AvgPool(geom) => ops::avg_pool(input(0), n, geom, inshape(0).c),
                Op::GlobalAvgPool => ops::global_avg_pool(input(0), n, inshape(0).pixels(), inshape(0).c),
                Op::Dropout { rate } => match dropout {
                    None => input(0).to_vec(),
                    Some(key) => {
                        use rand::Rng;
                        let mut rng = key.fold_in(id as u64).rng();
                        let mask: Vec<f64> = input(0)
                            .iter()
                            .map(|_| if rng.random::<f64>() < *rate { 1.0 / rate } else { 0.0 })
                            .collect();
                        let out = input(0).iter().zip(&mask).map(|(a, m)| a * m).collect();
                        masks[id] = Some(mask);
                        out
                    }
                },
                Op::Sum => {
                    let mut out = input(0).to_vec();
                    for k in 1..node.inputs.len() {
                        ops::add_into(&mut out, input(k));
                    }
                    out
                }
            };
            acts.push(out);
        }
        Ok(Tape { n, acts, masks })
    }

    /// Reverse pass from an output cotangent, reporting every affine node to `site`.
    pub(crate) fn backward(
        &self,
        params: &ParamTree,
        tape: &Tape,
        cotangent: &[f64],
        site: &mut dyn FnMut(AffineSite<'_>),
    ) -> Result<()> {
        let g = &self.graph;
        let n = tape.n;
        if cotangent.len() != tape.acts[g.output].len() {
            return Err(Error::Shape(format!(
                "cotangent has {} values, output has {}",
                cotangent.len(),
                tape.acts[g.output].len()
            )));
        }
        let mut cots: Vec<Option<Vec<f64>>> = vec![None; g.nodes.len()];
        cots[g.output] = Some(cotangent.to_vec());
        let wants = |i: usize| !matches!(g.nodes[i].op, Op::Input);
        for id in (0..g.nodes.len()).rev() {
            let Some(gout) = cots[id].take() else { continue };
            let node = &g.nodes[id];
            let push = |cots: &mut Vec<Option<Vec<f64>>>, i: usize, v: Vec<f64>| match &mut cots[i] {
                Some(acc) => ops::add_into(acc, &v),
                slot @ None => *slot = Some(v),
            };
            match &node.op {
                Op::Input => {}
                Op::Dense { param, fan_in, width, w_std, b_std } => {
                    let src = node.inputs[0];
                    let pixels = g.nodes[src].shape.pixels();
                    let rows = n * pixels;
                    let s = w_std / (*fan_in as f64).sqrt();
                    site(AffineSite {
                        param: *param,
                        input: &tape.acts[src],
                        cotangent: &gout,
                        rows_per_example: pixels,
                        w_scale: s,
                        b_std: *b_std,
                    });
                    if wants(src) {
                        let mut gin = vec![0.0; rows * fan_in];
                        gemm(rows, *width, *fan_in, s, &gout, false, &params.layers[*param].w, true, 0.0, &mut gin);
                        push(&mut cots, src, gin);
                    }
                }
                Op::Conv { param, geom, cin, cout, w_std, b_std } => {
                    let src = node.inputs[0];
                    let cols = ops::im2col(&tape.acts[src], n, geom, *cin);
                    let (rows, fan) = (n * geom.out_pixels(), geom.window() * cin);
                    let s = w_std / (fan as f64).sqrt();
                    site(AffineSite {
                        param: *param,
                        input: &cols,
                        cotangent: &gout,
                        rows_per_example: geom.out_pixels(),
                        w_scale: s,
                        b_std: *b_std,
                    });
                    if wants(src) {
                        let mut gcols = vec![0.0; rows * fan];
                        gemm(rows, *cout, fan, s, &gout, false, &params.layers[*param].w, true, 0.0, &mut gcols);
                        let mut gin = vec![0.0; tape.acts[src].len()];
                        ops::col2im_add(&gcols, n, geom, *cin, &mut gin);
                        push(&mut cots, src, gin);
                    }
                }
                Op::Phi(phi) => {
                    let src = node.inputs[0];
                    let gin = gout.iter().zip(&tape.acts[src]).map(|(gv, &z)| gv * ops::phi_d1(*phi, z)).collect();
                    push(&mut cots, src, gin);
                }
                Op::Flatten => push(&mut cots, node.inputs[0], gout),
                Op::AvgPool(geom) => {
                    let src = node.inputs[0];
                    let mut gin = vec![0.0; tape.acts[src].len()];
                    ops::avg_pool_adjoint_add(&gout, n, geom, g.nodes[src].shape.c, &mut gin);
                    push(&mut cots, src, gin);
                }
                Op::GlobalAvgPool => {
                    let src = node.inputs[0];
                    let s = g.nodes[src].shape;
                    let mut gin = vec![0.0; tape.acts[src].len()];
                    ops::global_avg_pool_adjoint_add(&gout, n, s.pixels(), s.c, &mut gin);
                    push(&mut cots, src, gin);
                }
                Op::Dropout { .. } => {
                    let gin = match &tape.masks[id] {
                        Some(m) => gout.iter().zip(m).map(|(a, b)| a * b).collect(),
                        None => gout,
                    };
                    push(&mut cots, node.inputs[0], gin);
                }
                Op::Sum => {
                    for &i in &node.inputs {
                        push(&mut cots, i, gout.clone());
                    }
                }
            }
        }
        Ok(())
    }
}

/// `∂W += s·Xᵀ G`, `∂β += σb·Σ_rows G`.
fn accumulate_grad(grad: &mut ParamTree, site: &AffineSite<'_>) {
    let layer = &mut grad.layers[site.param];
    let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
    let rows = site.input.len() / fan_in;
    gemm(fan_in, rows, fan_out, site.w_scale, site.input, true, site.cotangent, false, 1.0, &mut layer.w);
    if site.b_std != 0.0 {
        for (b, s) in layer.b.iter_mut().zip(ops::col_sums(site.cotangent, fan_out)) {
            *b += site.b_std * s;
        }
    }
}

/// Standard-normal parameters for `spec`.
pub fn init_params(spec: &NetSpec, key: RngKey) -> Result<ParamTree> {
    Ok(FiniteNet::new(spec)?.init_params(key))
}

/// Forward pass of `spec` at `params`.
pub fn apply(spec: &NetSpec, params: &ParamTree, x: &Batch) -> Result<Batch> {
    FiniteNet::new(spec)?.apply(params, x)
}
