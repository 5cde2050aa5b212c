//! Architecture trees.
//!
//! A [`NetSpec`] is a tree of [`Layer`]s under an input shape. The same tree
//! defines a finite network (widths matter) and its infinite-width kernel
//! (widths are ignored). Nonlinearities are stored in one canonical family:
//! `Relu`, `Abs` and `LeakyRelu` are all [`Phi::AbRelu`] with particular
//! slopes, so equivalent specs compare equal.

mod graph;
mod json;
mod plan;

use std::fmt;

pub(crate) use graph::{ConvGeom, Graph, Op};
pub use graph::{Rule, Violation};
pub use plan::{Representation, RepresentationPlan};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    #[serde(rename = "SAME")]
    Same,
    #[serde(rename = "VALID")]
    Valid,
    #[serde(rename = "CIRCULAR")]
    Circular,
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phi {
    /// `a·min(x, 0) + b·max(x, 0)` with `a ≤ b`.
    AbRelu {
        a: f64,
        b: f64,
    },
    Erf,
}

impl Phi {
    pub fn relu() -> Phi {
        Phi::AbRelu { a: 0.0, b: 1.0 }
    }

    pub fn leaky_relu(alpha: f64) -> Phi {
        Phi::AbRelu { a: alpha, b: 1.0 }
    }

    pub fn abs() -> Phi {
        Phi::AbRelu { a: -1.0, b: 1.0 }
    }

    pub fn identity() -> Phi {
        Phi::AbRelu { a: 1.0, b: 1.0 }
    }

    pub fn ab_relu(a: f64, b: f64) -> Phi {
        Phi::AbRelu { a, b }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        width: usize,
        w_std: f64,
        b_std: f64,
    },
    Conv {
        channels: usize,
        filter_shape: (usize, usize),
        strides: (usize, usize),
        padding: Padding,
        w_std: f64,
        b_std: f64,
    },
    Nonlinearity(Phi),
    Flatten,
    AvgPool {
        window: (usize, usize),
        strides: (usize, usize),
        padding: Padding,
    },
    GlobalAvgPool,
    /// Keeps each unit with probability `rate`.
    Dropout {
        rate: f64,
    },
    Identity,
    FanOut {
        n: usize,
    },
    FanInSum,
    Serial(Vec<Layer>),
    Parallel(Vec<Layer>),
}

impl Layer {
    pub fn dense(width: usize, w_std: f64, b_std: f64) -> Layer {
        Layer::Dense { width, w_std, b_std }
    }

    pub fn conv(
        channels: usize,
        filter_shape: (usize, usize),
        strides: (usize, usize),
        padding: Padding,
        w_std: f64,
        b_std: f64,
    ) -> Layer {
        Layer::Conv { channels, filter_shape, strides, padding, w_std, b_std }
    }

    pub fn relu() -> Layer {
        Layer::Nonlinearity(Phi::relu())
    }

    pub fn leaky_relu(alpha: f64) -> Layer {
        Layer::Nonlinearity(Phi::leaky_relu(alpha))
    }

    pub fn abs() -> Layer {
        Layer::Nonlinearity(Phi::abs())
    }

    pub fn ab_relu(a: f64, b: f64) -> Layer {
        Layer::Nonlinearity(Phi::ab_relu(a, b))
    }

    pub fn erf() -> Layer {
        Layer::Nonlinearity(Phi::Erf)
    }

    pub fn avg_pool(window: (usize, usize), strides: (usize, usize), padding: Padding) -> Layer {
        Layer::AvgPool { window, strides, padding }
    }

    pub fn dropout(rate: f64) -> Layer {
        Layer::Dropout { rate }
    }

    pub fn fan_out(n: usize) -> Layer {
        Layer::FanOut { n }
    }

    pub fn serial(children: Vec<Layer>) -> Layer {
        Layer::Serial(children)
    }

    pub fn parallel(children: Vec<Layer>) -> Layer {
        Layer::Parallel(children)
    }

    /// `FanOut(n) → Parallel(branches) → FanInSum`.
    pub fn residual(branches: Vec<Layer>) -> Layer {
        Layer::Serial(vec![Layer::FanOut { n: branches.len() }, Layer::Parallel(branches), Layer::FanInSum])
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }

    fn contains(&self, pred: &dyn Fn(&Layer) -> bool) -> bool {
        pred(self)
            || match self {
                Layer::Serial(c) | Layer::Parallel(c) => c.iter().any(|l| l.contains(pred)),
                _ => false,
            }
    }
}

/// Shape of one example flowing through the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputShape {
    Vector(usize),
    Image { h: usize, w: usize, c: usize },
}

impl InputShape {
    pub fn dim(&self) -> usize {
        match *self {
            InputShape::Vector(n) => n,
            InputShape::Image { h, w, c } => h * w * c,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, InputShape::Image { .. })
    }

    /// `(h, w, c)`, with vectors as `1 × 1 × n`.
    pub fn hwc(&self) -> (usize, usize, usize) {
        match *self {
            InputShape::Vector(n) => (1, 1, n),
            InputShape::Image { h, w, c } => (h, w, c),
        }
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputShape::Vector(n) => write!(f, "[{n}]"),
            InputShape::Image { h, w, c } => write!(f, "[{h}, {w}, {c}]"),
        }
    }
}

/// Child indices from the root to a node.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodePath(pub Vec<usize>);

impl NodePath {
    pub fn root() -> Self {
        NodePath(Vec::new())
    }

    pub fn child(&self, i: usize) -> Self {
        let mut p = self.0.clone();
        p.push(i);
        NodePath(p)
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("root");
        }
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        f.write_str(&parts.join("."))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub input_shape: InputShape,
    pub root: Layer,
}

impl NetSpec {
    pub fn new(input_shape: InputShape, root: Layer) -> Self {
        NetSpec { input_shape, root }
    }

    /// Every rule the tree breaks; empty when the spec is usable.
    pub fn validate(&self) -> Vec<Violation> {
        graph::walk(self).1
    }

    pub fn plan_representation(&self) -> Result<RepresentationPlan> {
        plan::plan(self, false)
    }

    /// A plan that tracks every spatial pixel pair, whatever the consumers need.
    pub fn plan_full(&self) -> Result<RepresentationPlan> {
        plan::plan(self, true)
    }

    pub(crate) fn compile(&self) -> Result<Graph> {
        let (graph, violations) = graph::walk(self);
        if violations.is_empty() {
            Ok(graph)
        } else {
            Err(Error::InvalidSpec(violations))
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.root.contains(&|l| matches!(l, Layer::Dropout { .. }))
    }

    /// Number of values in one output example.
    pub fn output_dim(&self) -> Result<usize> {
        let g = self.compile()?;
        Ok(g.nodes[g.output].shape.dim())
    }

    /// Copy of the spec whose last layer, which must be `Dense`, has `width` units.
    pub fn with_readout_width(&self, width: usize) -> Result<NetSpec> {
        fn last_dense(layer: &mut Layer) -> Option<&mut usize> {
            match layer {
                Layer::Dense { width, .. } => Some(width),
                Layer::Serial(children) => children.last_mut().and_then(last_dense),
                _ => None,
            }
        }
        let mut spec = self.clone();
        match last_dense(&mut spec.root) {
            Some(w) => {
                *w = width;
                Ok(spec)
            }
            None => Err(Error::Unsupported("network does not end with a Dense readout".into())),
        }
    }

    /// Copy of the spec with every hidden `Dense` width and `Conv` channel
    /// count set to `width`. A final `Dense` readout keeps its width.
    pub fn with_hidden_width(&self, width: usize) -> Result<NetSpec> {
        fn visit(layer: &mut Layer, width: usize) {
            match layer {
                Layer::Dense { width: w, .. } | Layer::Conv { channels: w, .. } => *w = width,
                Layer::Serial(c) | Layer::Parallel(c) => c.iter_mut().for_each(|l| visit(l, width)),
                _ => {}
            }
        }
        if width == 0 {
            return Err(Error::InvalidArgument("width must be at least 1".into()));
        }
        let mut spec = self.clone();
        visit(&mut spec.root, width);
        match self.with_readout_width(1) {
            Ok(_) => spec.with_readout_width(self.output_dim()?),
            Err(_) => Ok(spec),
        }
    }

    pub fn from_json(text: &str) -> Result<NetSpec> {
        json::from_json(text)
    }

    pub fn to_json(&self) -> String {
        json::to_json(self)
    }
}

/// Stock architectures used throughout the examples and tests.
pub mod zoo {
    use super::*;

    /// `depth` hidden `Dense → φ` blocks and a `Dense(out)` readout.
    pub fn mlp(input_dim: usize, width: usize, depth: usize, phi: Phi, w_std: f64, b_std: f64, out: usize) -> NetSpec {
        let mut layers = Vec::new();
        for _ in 0..depth {
            layers.push(Layer::dense(width, w_std, b_std));
            layers.push(Layer::Nonlinearity(phi));
        }
        layers.push(Layer::dense(out, w_std, b_std));
        NetSpec::new(InputShape::Vector(input_dim), Layer::serial(layers))
    }

    /// All-convolutional network with a flattened dense readout.
    pub fn conv_net(input: InputShape, channels: usize, depth: usize, w_std: f64, b_std: f64) -> NetSpec {
        let mut layers = Vec::new();
        for _ in 0..depth {
            layers.push(Layer::conv(channels, (3, 3), (1, 1), Padding::Same, w_std, b_std));
            layers.push(Layer::relu());
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::dense(1, w_std, b_std));
        NetSpec::new(input, Layer::serial(layers))
    }

    /// Flatten followed by `depth` dense ReLU layers.
    pub fn fully_connected(input: InputShape, width: usize, depth: usize, w_std: f64, b_std: f64) -> NetSpec {
        let mut layers = vec![Layer::Flatten];
        for _ in 0..depth {
            layers.push(Layer::dense(width, w_std, b_std));
            layers.push(Layer::relu());
        }
        layers.push(Layer::dense(1, w_std, b_std));
        NetSpec::new(input, Layer::serial(layers))
    }

    fn wrn_block(channels: usize, strides: (usize, usize), channel_mismatch: bool) -> Layer {
        let main = Layer::serial(vec![
            Layer::relu(),
            Layer::conv(channels, (3, 3), strides, Padding::Same, 1.0, 0.0),
            Layer::relu(),
            Layer::conv(channels, (3, 3), (1, 1), Padding::Same, 1.0, 0.0),
        ]);
        let shortcut = if channel_mismatch {
            Layer::conv(channels, (3, 3), strides, Padding::Same, 1.0, 0.0)
        } else {
            Layer::Identity
        };
        Layer::residual(vec![main, shortcut])
    }

    fn wrn_group(n: usize, channels: usize, strides: (usize, usize)) -> Layer {
        let mut blocks = vec![wrn_block(channels, strides, true)];
        for _ in 1..n {
            blocks.push(wrn_block(channels, (1, 1), false));
        }
        Layer::serial(blocks)
    }

    /// Wide residual network with `block_size` blocks per group and
    /// widening factor `k` (channels `16k`, `32k`, `64k`).
    pub fn wide_resnet(input: InputShape, block_size: usize, k: f64, num_classes: usize) -> NetSpec {
        let ch = |base: f64| ((base * k).round() as usize).max(1);
        NetSpec::new(
            input,
            Layer::serial(vec![
                Layer::conv(16, (3, 3), (1, 1), Padding::Same, 1.0, 0.0),
                wrn_group(block_size, ch(16.0), (1, 1)),
                wrn_group(block_size, ch(32.0), (2, 2)),
                wrn_group(block_size, ch(64.0), (2, 2)),
                Layer::GlobalAvgPool,
                Layer::dense(num_classes, 1.0, 0.0),
            ]),
        )
    }
}
