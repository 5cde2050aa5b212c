//! Flattening of the layer tree into a dataflow graph, with validation.
//!
//! Combinators disappear in the graph: `FanOut` reuses a node, `Parallel`
//! routes branches, `FanInSum` becomes a `Sum` node and `Identity` is a no-op.
//! Both the kernel engine and the finite networks execute this graph.

use std::fmt;

use super::{InputShape, Layer, NetSpec, NodePath, Padding, Phi};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    EmptyCombinator,
    InvalidParameter,
    NonlinearityWithoutAffine,
    UnmatchedFanOut,
    UnmergedBranches,
    ShapeMismatch,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::EmptyCombinator => "empty combinator",
            Rule::InvalidParameter => "invalid parameter",
            Rule::NonlinearityWithoutAffine => "nonlinearity without preceding affine layer",
            Rule::UnmatchedFanOut => "unmatched fan-out",
            Rule::UnmergedBranches => "unmerged branches",
            Rule::ShapeMismatch => "shape mismatch",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub path: NodePath,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}: {}", self.path, self.rule)?;
        if !self.message.is_empty() {
            write!(f, " ({})", self.message)?;
        }
        Ok(())
    }
}

/// Per-example shape inside the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub spatial: bool,
}

impl Shape {
    fn vector(n: usize) -> Shape {
        Shape { h: 1, w: 1, c: n, spatial: false }
    }

    pub fn dim(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Sliding-window geometry along both spatial axes, shared by convolution
/// and average pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub fh: usize,
    pub fw: usize,
    pub sh: usize,
    pub sw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub circular: bool,
}

pub(crate) type PoolGeom = ConvGeom;

impl ConvGeom {
    pub fn new(
        in_h: usize,
        in_w: usize,
        filter: (usize, usize),
        strides: (usize, usize),
        padding: Padding,
    ) -> Option<ConvGeom> {
        let axis = |n: usize, f: usize, s: usize| -> Option<(usize, usize)> {
            match padding {
                Padding::Valid => (n >= f).then(|| ((n - f) / s + 1, 0)),
                Padding::Same | Padding::Circular => {
                    let out = n.div_ceil(s);
                    let total = ((out - 1) * s + f).saturating_sub(n);
                    Some((out, total / 2))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h, filter.0, strides.0)?;
        let (out_w, pad_left) = axis(in_w, filter.1, strides.1)?;
        Some(ConvGeom {
            in_h,
            in_w,
            fh: filter.0,
            fw: filter.1,
            sh: strides.0,
            sw: strides.1,
            out_h,
            out_w,
            pad_top,
            pad_left,
            circular: padding == Padding::Circular,
        })
    }

    pub fn window(&self) -> usize {
        self.fh * self.fw
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn src(o: usize, d: usize, s: usize, pad: usize, n: usize, circular: bool) -> Option<usize> {
        let i = (o * s + d) as isize - pad as isize;
        if circular {
            Some(i.rem_euclid(n as isize) as usize)
        } else if i >= 0 && (i as usize) < n {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Flat input pixel read by output pixel `(oy, ox)` at window offset
    /// `(dy, dx)`, or `None` when it falls in zero padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, dy: usize, dx: usize) -> Option<usize> {
        let y = Self::src(oy, dy, self.sh, self.pad_top, self.in_h, self.circular)?;
        let x = Self::src(ox, dx, self.sw, self.pad_left, self.in_w, self.circular)?;
        Some(y * self.in_w + x)
    }

    /// For every output pixel, the input pixels under its window, in
    /// `(dy, dx)` order with `None` for padding.
    pub fn taps(&self) -> Vec<Vec<Option<usize>>> {
        let mut out = Vec::with_capacity(self.out_pixels());
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let mut t = Vec::with_capacity(self.window());
                for dy in 0..self.fh {
                    for dx in 0..self.fw {
                        t.push(self.source(oy, ox, dy, dx));
                    }
                }
                out.push(t);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Input,
    Dense { param: usize, fan_in: usize, width: usize, w_std: f64, b_std: f64 },
    Conv { param: usize, geom: ConvGeom, cin: usize, cout: usize, w_std: f64, b_std: f64 },
    Phi(Phi),
    Flatten,
    AvgPool(PoolGeom),
    GlobalAvgPool,
    Dropout { rate: f64 },
    Sum,
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub shape: Shape,
    pub gaussian: bool,
    pub path: NodePath,
}

#[derive(Clone, Debug)]
pub(crate) struct Graph {
    pub nodes: Vec<Node>,
    pub output: usize,
    /// For every tree node, the graph nodes flowing into it.
    pub entries: Vec<(NodePath, Vec<usize>)>,
}

impl Graph {
    /// For every node, the nodes that read it.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                out[i].push(id);
            }
        }
        out
    }
}

enum Flow {
    Single(usize),
    Many(Vec<usize>),
}

struct Walker {
    nodes: Vec<Node>,
    violations: Vec<Violation>,
    n_params: usize,
    entries: Vec<(NodePath, Vec<usize>)>,
}

impl Walker {
    fn violation(&mut self, path: &NodePath, rule: Rule, message: impl Into<String>) {
        self.violations.push(Violation { path: path.clone(), rule, message: message.into() });
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Shape, gaussian: bool, path: &NodePath) -> usize {
        self.nodes.push(Node { op, inputs, shape, gaussian, path: path.clone() });
        self.nodes.len() - 1
    }

    fn single(&mut self, flow: Flow, path: &NodePath) -> Option<usize> {
        match flow {
            Flow::Single(id) => Some(id),
            Flow::Many(ids) => {
                self.violation(
                    path,
                    Rule::UnmergedBranches,
                    format!("{} branches reach a single-input layer; merge them with FanInSum", ids.len()),
                );
                None
            }
        }
    }

    fn check_std(&mut self, path: &NodePath, name: &str, v: f64) {
        if !v.is_finite() || v < 0.0 {
            self.violation(path, Rule::InvalidParameter, format!("{name} must be finite and non-negative, got {v}"));
        }
    }

    fn spatial_input(&mut self, id: usize, path: &NodePath, what: &str) -> Option<Shape> {
        let shape = self.nodes[id].shape;
        if shape.spatial {
            Some(shape)
        } else {
            self.violation(path, Rule::ShapeMismatch, format!("{what} needs a spatial input"));
            None
        }
    }

    fn walk(&mut self, layer: &Layer, path: &NodePath, flow: Flow) -> Option<Flow> {
        let ids = match &flow {
            Flow::Single(id) => vec![*id],
            Flow::Many(ids) => ids.clone(),
        };
        self.entries.push((path.clone(), ids));
        match layer {
            Layer::Serial(children) => {
                if children.is_empty() {
                    self.violation(path, Rule::EmptyCombinator, "serial has no children");
                    return None;
                }
                let mut flow = flow;
                for (i, child) in children.iter().enumerate() {
                    let child_path = path.child(i);
                    match child {
                        Layer::Parallel(branches) => {
                            let matched =
                                i > 0 && matches!(children[i - 1], Layer::FanOut { n } if n == branches.len());
                            if !matched {
                                self.violation(
                                    &child_path,
                                    Rule::UnmatchedFanOut,
                                    format!(
                                        "parallel of arity {} must directly follow FanOut({})",
                                        branches.len(),
                                        branches.len()
                                    ),
                                );
                            }
                        }
                        Layer::FanOut { .. } if !matches!(children.get(i + 1), Some(Layer::Parallel(_))) => {
                            self.violation(
                                &child_path,
                                Rule::UnmatchedFanOut,
                                "FanOut must directly precede a Parallel",
                            );
                        }
                        _ => {}
                    }
                    flow = self.walk(child, &child_path, flow)?;
                }
                Some(flow)
            }
            Layer::Parallel(branches) => {
                if branches.is_empty() {
                    self.violation(path, Rule::EmptyCombinator, "parallel has no branches");
                    return None;
                }
                let inputs = match flow {
                    Flow::Many(ids) if ids.len() == branches.len() => ids,
                    Flow::Many(ids) => {
                        self.violation(
                            path,
                            Rule::UnmatchedFanOut,
                            format!("{} inputs for {} branches", ids.len(), branches.len()),
                        );
                        return None;
                    }
                    Flow::Single(_) => return None,
                };
                let mut outs = Vec::with_capacity(branches.len());
                let mut ok = true;
                for (i, (branch, input)) in branches.iter().zip(inputs).enumerate() {
                    let branch_path = path.child(i);
                    match self.walk(branch, &branch_path, Flow::Single(input)) {
                        Some(Flow::Single(id)) => outs.push(id),
                        Some(Flow::Many(_)) => {
                            self.violation(&branch_path, Rule::UnmergedBranches, "branch must produce a single output");
                            ok = false;
                        }
                        None => ok = false,
                    }
                }
                ok.then_some(Flow::Many(outs))
            }
            Layer::FanOut { n } => {
                if *n == 0 {
                    self.violation(path, Rule::InvalidParameter, "FanOut needs n >= 1");
                    return None;
                }
                let id = self.single(flow, path)?;
                Some(Flow::Many(vec![id; *n]))
            }
            Layer::FanInSum => {
                let ids = match flow {
                    Flow::Many(ids) => ids,
                    Flow::Single(_) => {
                        self.violation(path, Rule::UnmatchedFanOut, "FanInSum needs multiple branches");
                        return None;
                    }
                };
                let shape = self.nodes[ids[0]].shape;
                if let Some(&bad) = ids.iter().find(|&&id| self.nodes[id].shape != shape) {
                    let other = self.nodes[bad].shape;
                    self.violation(
                        path,
                        Rule::ShapeMismatch,
                        format!(
                            "branches have shapes {}x{}x{} and {}x{}x{}",
                            shape.h, shape.w, shape.c, other.h, other.w, other.c
                        ),
                    );
                    return None;
                }
                let gaussian = ids.iter().all(|&id| self.nodes[id].gaussian);
                Some(Flow::Single(self.push(Op::Sum, ids, shape, gaussian, path)))
            }
            Layer::Identity => {
                let id = self.single(flow, path)?;
                Some(Flow::Single(id))
            }
            Layer::Dense { width, w_std, b_std } => {
                let id = self.single(flow, path)?;
                self.check_std(path, "w_std", *w_std);
                self.check_std(path, "b_std", *b_std);
                if *width == 0 {
                    self.violation(path, Rule::InvalidParameter, "width must be positive");
                    return None;
                }
                let input = self.nodes[id].shape;
                let shape = Shape { c: *width, ..input };
                let op =
                    Op::Dense { param: self.n_params, fan_in: input.c, width: *width, w_std: *w_std, b_std: *b_std };
                self.n_params += 1;
                Some(Flow::Single(self.push(op, vec![id], shape, true, path)))
            }
            Layer::Conv { channels, filter_shape, strides, padding, w_std, b_std } => {
                let id = self.single(flow, path)?;
                self.check_std(path, "w_std", *w_std);
                self.check_std(path, "b_std", *b_std);
                if *channels == 0 || filter_shape.0 == 0 || filter_shape.1 == 0 || strides.0 == 0 || strides.1 == 0 {
                    self.violation(path, Rule::InvalidParameter, "channels, filter and strides must be >= 1");
                    return None;
                }
                let input = self.spatial_input(id, path, "Conv")?;
                let Some(geom) = ConvGeom::new(input.h, input.w, *filter_shape, *strides, *padding) else {
                    self.violation(path, Rule::ShapeMismatch, "filter larger than the VALID-padded input");
                    return None;
                };
                let shape = Shape { h: geom.out_h, w: geom.out_w, c: *channels, spatial: true };
                let op = Op::Conv {
                    param: self.n_params,
                    geom,
                    cin: input.c,
                    cout: *channels,
                    w_std: *w_std,
                    b_std: *b_std,
                };
                self.n_params += 1;
                Some(Flow::Single(self.push(op, vec![id], shape, true, path)))
            }
            Layer::Nonlinearity(phi) => {
                let id = self.single(flow, path)?;
                if let Phi::AbRelu { a, b } = phi {
                    if !(a.is_finite() && b.is_finite() && a <= b) {
                        self.violation(
                            path,
                            Rule::InvalidParameter,
                            format!("ABRelu needs a <= b, got a = {a}, b = {b}"),
                        );
                    }
                }
                if !self.nodes[id].gaussian {
                    self.violation(path, Rule::NonlinearityWithoutAffine, "");
                }
                let shape = self.nodes[id].shape;
                Some(Flow::Single(self.push(Op::Phi(*phi), vec![id], shape, false, path)))
            }
            Layer::Flatten => {
                let id = self.single(flow, path)?;
                let input = self.spatial_input(id, path, "Flatten")?;
                let gaussian = self.nodes[id].gaussian;
                Some(Flow::Single(self.push(Op::Flatten, vec![id], Shape::vector(input.dim()), gaussian, path)))
            }
            Layer::AvgPool { window, strides, padding } => {
                let id = self.single(flow, path)?;
                if window.0 == 0 || window.1 == 0 || strides.0 == 0 || strides.1 == 0 {
                    self.violation(path, Rule::InvalidParameter, "window and strides must be >= 1");
                    return None;
                }
                let input = self.spatial_input(id, path, "AvgPool")?;
                let Some(geom) = ConvGeom::new(input.h, input.w, *window, *strides, *padding) else {
                    self.violation(path, Rule::ShapeMismatch, "window larger than the VALID-padded input");
                    return None;
                };
                let shape = Shape { h: geom.out_h, w: geom.out_w, c: input.c, spatial: true };
                let gaussian = self.nodes[id].gaussian;
                Some(Flow::Single(self.push(Op::AvgPool(geom), vec![id], shape, gaussian, path)))
            }
            Layer::GlobalAvgPool => {
                let id = self.single(flow, path)?;
                let input = self.spatial_input(id, path, "GlobalAvgPool")?;
                let gaussian = self.nodes[id].gaussian;
                Some(Flow::Single(self.push(Op::GlobalAvgPool, vec![id], Shape::vector(input.c), gaussian, path)))
            }
            Layer::Dropout { rate } => {
                let id = self.single(flow, path)?;
                if !(*rate > 0.0 && *rate <= 1.0) {
                    self.violation(
                        path,
                        Rule::InvalidParameter,
                        format!("dropout rate must lie in (0, 1], got {rate}"),
                    );
                }
                let shape = self.nodes[id].shape;
                Some(Flow::Single(self.push(Op::Dropout { rate: *rate }, vec![id], shape, false, path)))
            }
        }
    }
}

/// Builds the graph and collects every violation found on the way.
pub(super) fn walk(spec: &NetSpec) -> (Graph, Vec<Violation>) {
    let mut w = Walker { nodes: Vec::new(), violations: Vec::new(), n_params: 0, entries: Vec::new() };
    let (h, wd, c) = spec.input_shape.hwc();
    let root = NodePath::root();
    if h == 0 || wd == 0 || c == 0 {
        w.violation(&root, Rule::ShapeMismatch, format!("input shape {} has an empty axis", spec.input_shape));
    }
    let spatial = matches!(spec.input_shape, InputShape::Image { .. });
    let input = w.push(Op::Input, vec![], Shape { h, w: wd, c, spatial }, false, &root);
    let output = match w.walk(&spec.root, &root, Flow::Single(input)) {
        Some(Flow::Single(id)) => id,
        Some(Flow::Many(_)) => {
            w.violation(&root, Rule::UnmergedBranches, "network ends with unmerged branches");
            input
        }
        None => input,
    };
    let graph = Graph { nodes: w.nodes, output, entries: w.entries };
    (graph, w.violations)
}
