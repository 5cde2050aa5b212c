use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::netspec::NodePath;
use crate::rng::RngKey;

/// Weights and biases of one affine layer. `w` is `fan_in × fan_out`
/// row-major; for convolutions `fan_in` runs over `(dy, dx, channel)`.
/// Entries are unscaled: the forward pass multiplies by `σw/√fan_in` and `σb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub path: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Parameters of a finite network, one record per affine layer in
/// traversal order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTree {
    pub layers: Vec<AffineParams>,
}

impl AffineParams {
    pub(crate) fn standard_normal(path: &NodePath, fan_in: usize, fan_out: usize, key: RngKey) -> AffineParams {
        let mut rng = key.rng();
        let mut draw = |n: usize| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        AffineParams { path: path.to_string(), fan_in, fan_out, w, b }
    }
}

impl ParamTree {
    pub fn zeros_like(&self) -> ParamTree {
        self.map(|_| 0.0)
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamTree {
        ParamTree {
            layers: self
                .layers
                .iter()
                .map(|l| AffineParams {
                    w: l.w.iter().map(|&v| f(v)).collect(),
                    b: l.b.iter().map(|&v| f(v)).collect(),
                    ..l.clone()
                })
                .collect(),
        }
    }

    fn zip_values<'a>(&'a self, other: &'a ParamTree) -> impl Iterator<Item = (&'a f64, &'a f64)> + 'a {
        self.layers.iter().zip(&other.layers).flat_map(|(a, b)| a.w.iter().zip(&b.w).chain(a.b.iter().zip(&b.b)))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    /// `self ← self + a·other`.
    pub fn add_scaled(&mut self, a: f64, other: &ParamTree) {
        assert!(self.same_shape(other), "parameter trees differ in shape");
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.w.iter_mut().zip(&o.w).for_each(|(x, y)| *x += a * y);
            l.b.iter_mut().zip(&o.b).for_each(|(x, y)| *x += a * y);
        }
    }

    pub(crate) fn set_zero(&mut self) {
        for l in &mut self.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v *= a);
        }
    }

    pub fn sub(&self, other: &ParamTree) -> ParamTree {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    pub fn dot(&self, other: &ParamTree) -> f64 {
        assert!(self.same_shape(other), "parameter trees differ in shape");
        self.zip_values(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ParamTree) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out && a.w.len() == b.w.len())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Tree of this shape holding `flat`, in [`ParamTree::to_flat`] order.
    pub fn with_flat(&self, flat: &[f64]) -> ParamTree {
        assert_eq!(flat.len(), self.len());
        let mut out = self.clone();
        for (v, f) in out.values_mut().zip(flat) {
            *v = *f;
        }
        out
    }
}
