//! Layered DNN computational-graph IR.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerNode`]s plus producer→consumer
//! edges, dependency groups (conv layers whose output channels must be pruned
//! identically, e.g. residual main/shortcut pairs), and a weight seed used to
//! materialize conv weights deterministically when a model file does not carry
//! them inline.

mod partition;
mod prune;
mod validate;
mod weights;

pub use partition::{partition_subgraphs, FusedOps, ShapeSummary, Subgraph, SubgraphId};
pub use prune::{apply_pruning, dependency_closure, rank_filters_l1};
pub use validate::{validate_graph, Violation};
pub use weights::materialize_weights;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a node in the model graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// A 2-D convolution layer.
///
/// Weights are stored flat in `[filter][input_channel][kernel_h][kernel_w]`
/// order and always match the declared dimensions once a model has been
/// loaded (inline weights are taken verbatim; missing ones are materialized
/// from the graph's weight seed).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: usize,
    pub input_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub input_spatial: (usize, usize),
    pub weights: Vec<f64>,
}

impl ConvLayer {
    /// Number of weights belonging to one filter.
    pub fn weights_per_filter(&self) -> usize {
        self.input_channels * self.kernel.0 * self.kernel.1
    }

    /// Weight slice of filter `index`.
    pub fn filter_weights(&self, index: usize) -> &[f64] {
        let per = self.weights_per_filter();
        &self.weights[index * per..(index + 1) * per]
    }

    /// Sum of absolute weights over the whole layer.
    pub fn l1_mass(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

/// Operation performed by a node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input,
    Conv2d(ConvLayer),
    BatchNorm,
    Relu,
    Add,
    Pool,
    Dense,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Input => "input",
            LayerOp::Conv2d(_) => "conv2d",
            LayerOp::BatchNorm => "batch_norm",
            LayerOp::Relu => "relu",
            LayerOp::Add => "add",
            LayerOp::Pool => "pool",
            LayerOp::Dense => "dense",
        }
    }
}

/// One node of the model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub op: LayerOp,
}

impl LayerNode {
    pub fn is_conv(&self) -> bool {
        matches!(self.op, LayerOp::Conv2d(_))
    }

    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match &self.op {
            LayerOp::Conv2d(c) => Some(c),
            _ => None,
        }
    }
}

/// The model graph: ordered nodes, edges, dependency groups, weight seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    edges: Vec<(NodeId, NodeId)>,
    dependency_groups: Vec<BTreeSet<NodeId>>,
    weight_seed: u64,
    index: HashMap<NodeId, usize>,
}

impl ModelGraph {
    /// Build a graph from parts. Weights of conv nodes are taken as given.
    pub fn new(
        nodes: Vec<LayerNode>,
        edges: Vec<(NodeId, NodeId)>,
        dependency_groups: Vec<BTreeSet<NodeId>>,
        weight_seed: u64,
    ) -> Self {
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            index.entry(n.id.clone()).or_insert(i);
        }
        ModelGraph { nodes, edges, dependency_groups, weight_seed, index }
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn dependency_groups(&self) -> &[BTreeSet<NodeId>] {
        &self.dependency_groups
    }

    pub fn weight_seed(&self) -> u64 {
        self.weight_seed
    }

    pub fn node(&self, id: &NodeId) -> Option<&LayerNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn conv(&self, id: &NodeId) -> Option<&ConvLayer> {
        self.node(id).and_then(|n| n.as_conv())
    }

    /// Producers of `id`, in edge declaration order.
    pub fn producers(&self, id: &NodeId) -> Vec<&NodeId> {
        self.edges.iter().filter(|(_, to)| to == id).map(|(from, _)| from).collect()
    }

    /// Consumers of `id`, in edge declaration order.
    pub fn consumers(&self, id: &NodeId) -> Vec<&NodeId> {
        self.edges.iter().filter(|(from, _)| from == id).map(|(_, to)| to).collect()
    }

    /// Ids of all conv nodes, in declaration order.
    pub fn conv_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().filter(|n| n.is_conv()).map(|n| &n.id)
    }

    /// Topological order of node indices (Kahn), ties broken by declaration
    /// order. `Err` carries the indices left on a cycle.
    pub fn topo_order(&self) -> Result<Vec<usize>, Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (from, to) in &self.edges {
            if let (Some(&f), Some(&t)) = (self.index.get(from), self.index.get(to)) {
                indegree[t] += 1;
                out[f].push(t);
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &t in &out[i] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.insert(t);
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err((0..n).filter(|&i| indegree[i] > 0).collect())
        }
    }

    /// The nearest conv node upstream of `id`, walking producer edges
    /// depth-first in declaration order. This is the canonical reference
    /// used to align input-channel removal with a producer's pruned filters
    /// (at a multi-branch join the first-listed branch wins).
    pub fn first_upstream_conv(&self, id: &NodeId) -> Option<&NodeId> {
        fn walk<'a>(
            graph: &'a ModelGraph,
            id: &NodeId,
            visited: &mut BTreeSet<NodeId>,
        ) -> Option<&'a NodeId> {
            for p in graph.producers(id) {
                if !visited.insert(p.clone()) {
                    continue;
                }
                match graph.node(p).map(|n| n.is_conv()) {
                    Some(true) => return graph.index.get_key_value(p).map(|(k, _)| k),
                    Some(false) => {
                        if let Some(found) = walk(graph, p, visited) {
                            return Some(found);
                        }
                    }
                    None => {}
                }
            }
            None
        }
        walk(self, id, &mut BTreeSet::new())
    }

    /// All conv nodes upstream of `id` reachable without crossing another conv.
    pub fn upstream_convs(&self, id: &NodeId) -> Vec<&NodeId> {
        let mut found = Vec::new();
        let mut visited = BTreeSet::new();
        let mut stack: Vec<&NodeId> = self.producers(id);
        while let Some(p) = stack.pop() {
            if !visited.insert(p.clone()) {
                continue;
            }
            match self.node(p) {
                Some(n) if n.is_conv() => {
                    found.push(&self.nodes[self.index[p]].id);
                }
                Some(_) => stack.extend(self.producers(p)),
                None => {}
            }
        }
        found.sort();
        found.dedup();
        found
    }

    /// Load a model spec file (JSON) and materialize weights.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| LoadError::Io { path: path.to_path_buf(), source })?;
        let spec: ModelSpec = serde_json::from_str(&text)?;
        ModelGraph::from_spec(spec)
    }

    /// Convert a parsed spec into a graph, materializing any conv weights
    /// that were not given inline.
    pub fn from_spec(spec: ModelSpec) -> Result<Self, LoadError> {
        let conv_ids: BTreeSet<&str> = spec
            .nodes
            .iter()
            .filter_map(|n| match n {
                NodeSpec::Conv2d { id, .. } => Some(id.as_str()),
                _ => None,
            })
            .collect();
        for id in spec.weights.keys() {
            if !conv_ids.contains(id.as_str()) {
                return Err(LoadError::UnknownWeightNode(id.clone()));
            }
        }

        let mut nodes = Vec::with_capacity(spec.nodes.len());
        for n in &spec.nodes {
            let (id, op) = match n {
                NodeSpec::Input { id } => (id, LayerOp::Input),
                NodeSpec::BatchNorm { id } => (id, LayerOp::BatchNorm),
                NodeSpec::Relu { id } => (id, LayerOp::Relu),
                NodeSpec::Add { id } => (id, LayerOp::Add),
                NodeSpec::Pool { id } => (id, LayerOp::Pool),
                NodeSpec::Dense { id } => (id, LayerOp::Dense),
                NodeSpec::Conv2d { id, filters, input_channels, kernel, stride, input_spatial } => {
                    let len = filters * input_channels * kernel[0] * kernel[1];
                    let weights = match spec.weights.get(id) {
                        Some(w) => w.clone(),
                        None => materialize_weights(spec.weight_seed, id, len),
                    };
                    let conv = ConvLayer {
                        filters: *filters,
                        input_channels: *input_channels,
                        kernel: (kernel[0], kernel[1]),
                        stride: (stride[0], stride[1]),
                        input_spatial: (input_spatial[0], input_spatial[1]),
                        weights,
                    };
                    (id, LayerOp::Conv2d(conv))
                }
            };
            nodes.push(LayerNode { id: NodeId::new(id.clone()), op });
        }

        let edges = spec
            .edges
            .iter()
            .map(|(a, b)| (NodeId::new(a.clone()), NodeId::new(b.clone())))
            .collect();
        let groups = spec
            .dependency_groups
            .iter()
            .map(|g| g.iter().map(|id| NodeId::new(id.clone())).collect())
            .collect();
        Ok(ModelGraph::new(nodes, edges, groups, spec.weight_seed))
    }

    /// Serialize back to the file format. When `include_weights` is false the
    /// spec carries structure only (shapes cannot be reconstructed from the
    /// seed once a graph has been pruned).
    pub fn to_spec(&self, include_weights: bool) -> ModelSpec {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let id = n.id.as_str().to_string();
                match &n.op {
                    LayerOp::Input => NodeSpec::Input { id },
                    LayerOp::BatchNorm => NodeSpec::BatchNorm { id },
                    LayerOp::Relu => NodeSpec::Relu { id },
                    LayerOp::Add => NodeSpec::Add { id },
                    LayerOp::Pool => NodeSpec::Pool { id },
                    LayerOp::Dense => NodeSpec::Dense { id },
                    LayerOp::Conv2d(c) => NodeSpec::Conv2d {
                        id,
                        filters: c.filters,
                        input_channels: c.input_channels,
                        kernel: [c.kernel.0, c.kernel.1],
                        stride: [c.stride.0, c.stride.1],
                        input_spatial: [c.input_spatial.0, c.input_spatial.1],
                    },
                }
            })
            .collect();
        let weights = if include_weights {
            self.nodes
                .iter()
                .filter_map(|n| {
                    n.as_conv().map(|c| (n.id.as_str().to_string(), c.weights.clone()))
                })
                .collect()
        } else {
            BTreeMap::new()
        };
        ModelSpec {
            weight_seed: self.weight_seed,
            nodes,
            edges: self
                .edges
                .iter()
                .map(|(a, b)| (a.as_str().to_string(), b.as_str().to_string()))
                .collect(),
            dependency_groups: self
                .dependency_groups
                .iter()
                .map(|g| g.iter().map(|id| id.as_str().to_string()).collect())
                .collect(),
            weights,
        }
    }
}

/// Serde-facing model file schema.
///
/// ```json
/// {
///   "weight_seed": 42,
///   "nodes": [
///     {"id": "in", "kind": "input"},
///     {"id": "c1", "kind": "conv2d", "filters": 8, "input_channels": 3,
///      "kernel": [3, 3], "stride": [1, 1], "input_spatial": [16, 16]}
///   ],
///   "edges": [["in", "c1"]],
///   "dependency_groups": [],
///   "weights": {"c1": [0.1, -0.2]}
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub weight_seed: u64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub dependency_groups: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, Vec<f64>>,
}

/// One node entry of a model spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeSpec {
    Input {
        id: String,
    },
    Conv2d {
        id: String,
        filters: usize,
        input_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        input_spatial: [usize; 2],
    },
    BatchNorm {
        id: String,
    },
    Relu {
        id: String,
    },
    Add {
        id: String,
    },
    Pool {
        id: String,
    },
    Dense {
        id: String,
    },
}

/// Errors loading a model spec file.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("inline weights given for unknown or non-conv node `{0}`")]
    UnknownWeightNode(String),
}

/// Errors from graph operations.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph failed validation: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("node `{0}` is not a conv2d layer")]
    NotConv(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("prune count {count} would leave `{node}` with fewer than one filter (has {filters})")]
    CountTooLarge { node: NodeId, filters: usize, count: usize },
    #[error("pruning `{node}` requires pruning its whole dependency group; `{missing}` is not targeted")]
    GroupNotCovered { node: NodeId, missing: NodeId },
    #[error("missing or invalid filter ranking for `{0}`")]
    BadRanking(NodeId),
}

fn format_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
