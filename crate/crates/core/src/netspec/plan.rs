//! Choosing how much spatial covariance each node must carry.
//!
//! A kernel between two images can be tracked at three costs per input pair:
//! a single number, one number per pixel (the same-pixel diagonal), or one
//! number per pixel pair. Convolutions and pointwise layers only ever read
//! the same-pixel diagonal of their input when their output is only needed on
//! the diagonal; pooling mixes pixels and needs every pair. One backward pass
//! over the graph propagates a "needs full spatial covariance" bit from the
//! pooling layers to the input.

use std::collections::BTreeMap;

use super::graph::Op;
use super::{NetSpec, NodePath};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Representation {
    /// One entry per input pair.
    VectorOnly,
    /// One entry per input pair and pixel.
    SpatialMarginal,
    /// One entry per input pair and pixel pair.
    SpatialFull,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationPlan {
    tags: BTreeMap<NodePath, Representation>,
    pub(crate) node_reps: Vec<Representation>,
}

impl RepresentationPlan {
    /// Representation of the kernel entering the tree node at `path`.
    pub fn tag(&self, path: &NodePath) -> Option<Representation> {
        self.tags.get(path).copied()
    }

    pub fn tags(&self) -> impl Iterator<Item = (&NodePath, Representation)> {
        self.tags.iter().map(|(p, r)| (p, *r))
    }

    /// The costliest representation used anywhere.
    pub fn max_representation(&self) -> Representation {
        self.node_reps.iter().copied().max().unwrap_or(Representation::VectorOnly)
    }
}

pub(super) fn plan(spec: &NetSpec, force_full: bool) -> Result<RepresentationPlan> {
    let graph = spec.compile()?;
    let consumers = graph.consumers();
    let n = graph.nodes.len();

    let mut needs_full = vec![force_full; n];
    if !force_full {
        for id in (0..n).rev() {
            needs_full[id] = consumers[id].iter().any(|&c| match graph.nodes[c].op {
                Op::AvgPool(_) | Op::GlobalAvgPool => true,
                Op::Flatten => false,
                _ => needs_full[c],
            });
        }
    }

    let node_reps: Vec<Representation> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(id, node)| {
            let flattened_input = matches!(node.op, Op::Input)
                && !force_full
                && !consumers[id].is_empty()
                && consumers[id].iter().all(|&c| matches!(graph.nodes[c].op, Op::Flatten));
            if !node.shape.spatial || flattened_input {
                Representation::VectorOnly
            } else if needs_full[id] {
                Representation::SpatialFull
            } else {
                Representation::SpatialMarginal
            }
        })
        .collect();

    let mut tags = BTreeMap::new();
    for (path, ids) in &graph.entries {
        let reps: Vec<Representation> = ids.iter().map(|&i| node_reps[i]).collect();
        if reps.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Representation {
                path: path.to_string(),
                message: "branches entering this node carry incompatible representations".into(),
            });
        }
        tags.entry(path.clone()).or_insert(reps[0]);
    }
    Ok(RepresentationPlan { tags, node_reps })
}
