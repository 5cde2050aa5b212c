//! Analytic NNGP and NTK of infinitely wide networks.
//!
//! [`KernelFn`] compiles a [`NetSpec`] once and then maps pairs of input
//! batches to kernel matrices by pushing a [`KernelPair`] through the
//! per-layer rules in [`rules`]. Both kernels come out of one traversal.
//!
//! ```
//! use tangent_kernels::{netspec::zoo, Batch, Get, KernelFn, KernelFunction, Phi};
//!
//! let spec = zoo::mlp(2, 512, 2, Phi::relu(), 1.5, 0.05, 1);
//! let x = Batch::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
//! let k = KernelFn::new(&spec).unwrap().compute(&x, None, Get::Both).unwrap();
//! let ntk = k.ntk.unwrap();
//! assert!(ntk[(0, 0)] >= k.nngp[(0, 0)]);
//! assert_eq!(k.nngp[(0, 1)], k.nngp[(1, 0)]);
//! ```

mod blocks;
pub mod rules;
pub mod transforms;

use std::borrow::Cow;

use nalgebra::DMatrix;

pub use blocks::{CovBlocks, Layout, Pairs};
pub use rules::{
    avgpool_translate, conv_translate, dense_translate, dropout_translate, faninsum_translate, fanout_translate,
    flatten_translate, globalavgpool_translate, input_kernel, nonlin_translate, to_marginal,
};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::netspec::{Graph, InputShape, NetSpec, Op, Representation, RepresentationPlan};

/// Covariance state flowing along one edge of the network.
///
/// `nngp` and `ntk` hold one block per stored input pair (see [`Pairs`]);
/// `var1` and `var2` hold each input's kernel against itself in the same
/// layout, which the nonlinearity rule needs. When both sides are the same
/// batch, `var2` is `None` and only pairs `i ≤ j` are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPair {
    pub nngp: CovBlocks,
    /// Absent when only the NNGP was requested.
    pub ntk: Option<CovBlocks>,
    pub var1: CovBlocks,
    pub var2: Option<CovBlocks>,
    pub pairs: Pairs,
    /// Whether the layer output is a Gaussian pre-activation.
    pub is_gaussian: bool,
}

impl KernelPair {
    pub fn representation(&self) -> Representation {
        self.nngp.layout().representation()
    }

    pub fn spatial_shape(&self) -> Option<(usize, usize)> {
        self.nngp.layout().spatial_shape()
    }

    /// `(|X1|, |X2|)`.
    pub fn shape(&self) -> (usize, usize) {
        self.pairs.shape()
    }

    /// Block for inputs `(i, j)`. With symmetric storage and `i > j`, a
    /// `Full` block is returned transposed so rows always index `x1` pixels.
    pub fn nngp_block(&self, i: usize, j: usize) -> Vec<f64> {
        self.block_of(&self.nngp, i, j)
    }

    pub fn ntk_block(&self, i: usize, j: usize) -> Option<Vec<f64>> {
        self.ntk.as_ref().map(|t| self.block_of(t, i, j))
    }

    fn block_of(&self, c: &CovBlocks, i: usize, j: usize) -> Vec<f64> {
        match self.pairs {
            Pairs::Cross { .. } => c.block(self.pairs.slot(i, j)).to_vec(),
            Pairs::Symmetric { .. } => {
                let (a, b) = if i <= j { (i, j) } else { (j, i) };
                let block = c.block(self.pairs.slot(a, b));
                match (c.layout(), i > j) {
                    (Layout::Full { .. }, true) => {
                        let p = c.layout().pixels();
                        let mut t = vec![0.0; block.len()];
                        for r in 0..p {
                            for s in 0..p {
                                t[s * p + r] = block[r * p + s];
                            }
                        }
                        t
                    }
                    _ => block.to_vec(),
                }
            }
        }
    }

    /// The NNGP as a dense `|X1| × |X2|` matrix. Requires `VectorOnly`.
    pub fn nngp_matrix(&self) -> Result<DMatrix<f64>> {
        self.matrix(&self.nngp)
    }

    pub fn ntk_matrix(&self) -> Result<Option<DMatrix<f64>>> {
        self.ntk.as_ref().map(|t| self.matrix(t)).transpose()
    }

    fn matrix(&self, c: &CovBlocks) -> Result<DMatrix<f64>> {
        if c.layout() != Layout::Vector {
            return Err(Error::Representation {
                path: "output".into(),
                message: "kernel is still spatial; end the network with Flatten or GlobalAvgPool".into(),
            });
        }
        let (n1, n2) = self.pairs.shape();
        let mut m = DMatrix::zeros(n1, n2);
        for ((i, j), &v) in self.pairs.iter().zip(c.data()) {
            m[(i, j)] = v;
            if self.pairs.is_symmetric() {
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }

    /// Approximate heap footprint of the stored tensors.
    pub fn size_bytes(&self) -> usize {
        self.nngp.size_bytes()
            + self.ntk.as_ref().map_or(0, CovBlocks::size_bytes)
            + self.var1.size_bytes()
            + self.var2.as_ref().map_or(0, CovBlocks::size_bytes)
    }
}

/// Which kernels to return.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Get {
    Nngp,
    Ntk,
    Both,
}

impl Get {
    pub fn wants_ntk(self) -> bool {
        self != Get::Nngp
    }
}

impl std::str::FromStr for Get {
    type Err = Error;

    fn from_str(s: &str) -> Result<Get> {
        match s {
            "nngp" => Ok(Get::Nngp),
            "ntk" => Ok(Get::Ntk),
            "both" => Ok(Get::Both),
            _ => Err(Error::InvalidArgument(format!("unknown kernel {s:?}; expected nngp, ntk or both"))),
        }
    }
}

/// Kernel matrices between two batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub nngp: DMatrix<f64>,
    pub ntk: Option<DMatrix<f64>>,
}

impl Kernel {
    /// The NTK when present, else the NNGP.
    pub fn primary(&self, get: Get) -> &DMatrix<f64> {
        match (get, &self.ntk) {
            (Get::Nngp, _) | (_, None) => &self.nngp,
            (_, Some(t)) => t,
        }
    }
}

/// Anything that maps two batches to kernel matrices.
pub trait KernelFunction: Sync {
    fn compute(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<Kernel>;
}

impl<K: KernelFunction + ?Sized> KernelFunction for &K {
    fn compute(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<Kernel> {
        (**self).compute(x1, x2, get)
    }
}

impl<K: KernelFunction + ?Sized> KernelFunction for Box<K> {
    fn compute(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<Kernel> {
        (**self).compute(x1, x2, get)
    }
}

/// Compiled analytic kernel of a [`NetSpec`].
#[derive(Clone, Debug)]
pub struct KernelFn {
    spec: NetSpec,
    graph: Graph,
    plan: RepresentationPlan,
}

impl KernelFn {
    pub fn new(spec: &NetSpec) -> Result<KernelFn> {
        Self::with_plan(spec, spec.plan_representation()?)
    }

    /// Tracks every pixel pair everywhere. Slower; used to cross-check the planner.
    pub fn full_spatial(spec: &NetSpec) -> Result<KernelFn> {
        Self::with_plan(spec, spec.plan_full()?)
    }

    fn with_plan(spec: &NetSpec, plan: RepresentationPlan) -> Result<KernelFn> {
        let graph = spec.compile()?;
        Ok(KernelFn { spec: spec.clone(), graph, plan })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn plan(&self) -> &RepresentationPlan {
        &self.plan
    }

    /// Runs the network and returns the output covariance state.
    pub fn propagate(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<KernelPair> {
        let x1 = conform(x1, self.spec.input_shape)?;
        let x2 = x2.map(|x| conform(x, self.spec.input_shape)).transpose()?;
        let g = &self.graph;
        let reps = &self.plan.node_reps;
        let consumers = g.consumers();
        let mut remaining: Vec<usize> = consumers.iter().map(Vec::len).collect();
        remaining[g.output] += 1;
        let mut values: Vec<Option<KernelPair>> = vec![None; g.nodes.len()];

        for (id, node) in g.nodes.iter().enumerate() {
            let path = node.path.to_string();
            let target = reps[id];
            // Take the input when this is its last reader, otherwise copy.
            let mut take = |i: usize| -> KernelPair {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    values[i].take().expect("graph inputs precede their readers")
                } else {
                    values[i].clone().expect("graph inputs precede their readers")
                }
            };
            let fit = |k: KernelPair| -> KernelPair {
                if target < Representation::SpatialFull {
                    to_marginal(k)
                } else {
                    k
                }
            };
            let result = match &node.op {
                Op::Input => rules::input_kernel_with(&x1, x2.as_deref(), target, get.wants_ntk()),
                Op::Dense { w_std, b_std, .. } => Ok(dense_translate(fit(take(node.inputs[0])), *w_std, *b_std)),
                Op::Conv { geom, w_std, b_std, .. } => {
                    rules::conv_geom(fit(take(node.inputs[0])), geom, *w_std, *b_std)
                }
                Op::Phi(phi) => nonlin_translate(fit(take(node.inputs[0])), *phi),
                Op::Dropout { rate } => Ok(dropout_translate(fit(take(node.inputs[0])), *rate)),
                Op::Flatten => Ok(flatten_translate(take(node.inputs[0]))),
                Op::AvgPool(geom) => rules::avgpool_geom(take(node.inputs[0]), geom).map(fit),
                Op::GlobalAvgPool => globalavgpool_translate(take(node.inputs[0])),
                Op::Sum => {
                    let ks: Vec<KernelPair> = node.inputs.iter().map(|&i| fit(take(i))).collect();
                    faninsum_translate(ks)
                }
            };
            let k = result.map_err(|e| at_path(e, &path))?;
            if k.representation() != target {
                return Err(Error::Representation {
                    path,
                    message: format!("produced {:?} where {:?} was planned", k.representation(), target),
                });
            }
            values[id] = Some(k);
        }
        Ok(values[g.output].take().expect("output computed"))
    }
}

impl KernelFunction for KernelFn {
    fn compute(&self, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<Kernel> {
        let k = self.propagate(x1, x2, get)?;
        Ok(Kernel { nngp: k.nngp_matrix()?, ntk: if get.wants_ntk() { k.ntk_matrix()? } else { None } })
    }
}

/// Analytic kernels of `spec` between `x1` and `x2` (or `x1` with itself).
pub fn kernel_fn(spec: &NetSpec, x1: &Batch, x2: Option<&Batch>, get: Get) -> Result<Kernel> {
    KernelFn::new(spec)?.compute(x1, x2, get)
}

fn at_path(e: Error, path: &str) -> Error {
    match e {
        Error::NotGaussian { .. } => Error::NotGaussian { path: path.into() },
        Error::Representation { message, .. } => Error::Representation { path: path.into(), message },
        Error::Shape(m) => Error::Shape(format!("node {path}: {m}")),
        other => other,
    }
}

/// Checks a batch against the spec's input shape. Flat vectors of the right
/// length are reinterpreted as images.
pub(crate) fn conform(x: &Batch, shape: InputShape) -> Result<Cow<'_, Batch>> {
    let (h, w, c) = shape.hwc();
    if x.example_shape() == (h, w, c) {
        return Ok(Cow::Borrowed(x));
    }
    if x.example_shape() == (1, 1, shape.dim()) {
        return Ok(Cow::Owned(x.clone().reshaped(h, w, c)?));
    }
    let (bh, bw, bc) = x.example_shape();
    Err(Error::Shape(format!("inputs are {bh}x{bw}x{bc} but the network expects {shape}")))
}
