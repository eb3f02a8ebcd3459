//! Subgraph partitioning.
//!
//! Each conv node anchors one subgraph that absorbs everything downstream of
//! it up to (but not including) the next conv: batch norm, relu, add, and
//! pool nodes. Subgraph ids are assigned in topological order.

use std::collections::BTreeSet;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{validate_graph, GraphError, LayerOp, ModelGraph, NodeId};

/// Identifier of a subgraph, displayed as `S1`, `S2`, …
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubgraphId(pub u32);

impl fmt::Display for SubgraphId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

impl Serialize for SubgraphId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubgraphId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let digits = s
            .strip_prefix('S')
            .ok_or_else(|| D::Error::custom(format!("subgraph id `{s}` must look like `S7`")))?;
        digits
            .parse()
            .map(SubgraphId)
            .map_err(|_| D::Error::custom(format!("subgraph id `{s}` must look like `S7`")))
    }
}

/// Which glue ops are fused into a subgraph after its anchor conv.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct FusedOps {
    pub has_bn: bool,
    pub has_relu: bool,
    pub has_add: bool,
}

/// Structural shape of a subgraph's anchor conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub input_channels: usize,
    pub input_spatial: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub filters: usize,
}

/// A conv-anchored region of the model graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub id: SubgraphId,
    pub anchor_conv: NodeId,
    pub fused: FusedOps,
    pub shape: ShapeSummary,
}

/// Partition a validated model into subgraphs, one per conv node, ids in
/// topological order.
pub fn partition_subgraphs(model: &ModelGraph) -> Result<Vec<Subgraph>, GraphError> {
    let violations = validate_graph(model);
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations));
    }

    let order = model.topo_order().expect("validated graph is acyclic");
    let mut subgraphs = Vec::new();
    for idx in order {
        let node = &model.nodes()[idx];
        let conv = match node.as_conv() {
            Some(c) => c,
            None => continue,
        };

        let mut fused = FusedOps::default();
        let mut visited = BTreeSet::new();
        let mut stack: Vec<NodeId> = model.consumers(&node.id).into_iter().cloned().collect();
        while let Some(next) = stack.pop() {
            if !visited.insert(next.clone()) {
                continue;
            }
            match model.node(&next).map(|n| &n.op) {
                Some(LayerOp::Conv2d(_)) => continue,
                Some(LayerOp::BatchNorm) => fused.has_bn = true,
                Some(LayerOp::Relu) => fused.has_relu = true,
                Some(LayerOp::Add) => fused.has_add = true,
                Some(LayerOp::Pool) | Some(LayerOp::Dense) | Some(LayerOp::Input) | None => {}
            }
            stack.extend(model.consumers(&next).into_iter().cloned());
        }

        subgraphs.push(Subgraph {
            id: SubgraphId(subgraphs.len() as u32 + 1),
            anchor_conv: node.id.clone(),
            fused,
            shape: ShapeSummary {
                input_channels: conv.input_channels,
                input_spatial: conv.input_spatial,
                kernel: conv.kernel,
                stride: conv.stride,
                filters: conv.filters,
            },
        });
    }
    Ok(subgraphs)
}
