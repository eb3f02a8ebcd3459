//! Structural validation of a [`ModelGraph`].

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use super::{LayerOp, ModelGraph, NodeId};

/// A broken graph invariant. `validate_graph` returns every violation it can
/// find; an empty list means the graph is well-formed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(NodeId),
    #[error("edge ({from}, {to}) references unknown node `{unknown}`")]
    UnknownEdgeEndpoint { from: NodeId, to: NodeId, unknown: NodeId },
    #[error("graph has a cycle through {}", join_ids(.0))]
    Cycle(Vec<NodeId>),
    #[error("non-input node `{0}` has no producer")]
    MissingProducer(NodeId),
    #[error("conv `{node}` has zero-sized dimension `{field}`")]
    BadConvDims { node: NodeId, field: &'static str },
    #[error("conv `{node}` has {actual} weights, expected {expected}")]
    WeightShapeMismatch { node: NodeId, expected: usize, actual: usize },
    #[error(
        "channel mismatch: `{consumer}` expects {input_channels} input channels but upstream conv `{producer}` has {filters} filters"
    )]
    ChannelMismatch { producer: NodeId, consumer: NodeId, filters: usize, input_channels: usize },
    #[error("add `{add}` joins branches with unequal channel counts {counts:?}")]
    AddChannelMismatch { add: NodeId, counts: Vec<usize> },
    #[error("dependency group member `{0}` does not exist")]
    GroupUnknownMember(NodeId),
    #[error("dependency group member `{0}` is not a conv2d layer")]
    GroupMemberNotConv(NodeId),
    #[error("dependency group {} has unequal filter counts {counts:?}", join_ids(.members))]
    GroupFilterMismatch { members: Vec<NodeId>, counts: Vec<usize> },
}

fn join_ids(ids: &[NodeId]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "`{id}`");
    }
    s
}

/// Check every [`ModelGraph`] invariant and return the violations found.
pub fn validate_graph(model: &ModelGraph) -> Vec<Violation> {
    let mut violations = Vec::new();

    let mut seen = BTreeSet::new();
    for node in model.nodes() {
        if !seen.insert(node.id.clone()) {
            violations.push(Violation::DuplicateNodeId(node.id.clone()));
        }
    }

    for (from, to) in model.edges() {
        for endpoint in [from, to] {
            if model.node(endpoint).is_none() {
                violations.push(Violation::UnknownEdgeEndpoint {
                    from: from.clone(),
                    to: to.clone(),
                    unknown: endpoint.clone(),
                });
            }
        }
    }

    for node in model.nodes() {
        if let LayerOp::Conv2d(c) = &node.op {
            for (value, field) in [
                (c.filters, "filters"),
                (c.input_channels, "input_channels"),
                (c.kernel.0, "kernel.h"),
                (c.kernel.1, "kernel.w"),
                (c.stride.0, "stride.h"),
                (c.stride.1, "stride.w"),
                (c.input_spatial.0, "input_spatial.h"),
                (c.input_spatial.1, "input_spatial.w"),
            ] {
                if value == 0 {
                    violations.push(Violation::BadConvDims { node: node.id.clone(), field });
                }
            }
            let expected = c.filters * c.input_channels * c.kernel.0 * c.kernel.1;
            if c.weights.len() != expected {
                violations.push(Violation::WeightShapeMismatch {
                    node: node.id.clone(),
                    expected,
                    actual: c.weights.len(),
                });
            }
        }
    }

    for node in model.nodes() {
        if !matches!(node.op, LayerOp::Input) && model.producers(&node.id).is_empty() {
            violations.push(Violation::MissingProducer(node.id.clone()));
        }
    }

    // Channel analysis walks producer edges; bail out on cycles first.
    if let Err(stuck) = model.topo_order() {
        violations.push(Violation::Cycle(
            stuck.iter().map(|&i| model.nodes()[i].id.clone()).collect(),
        ));
        return violations;
    }

    for node in model.nodes() {
        if let LayerOp::Conv2d(c) = &node.op {
            for producer in model.upstream_convs(&node.id) {
                let filters = model.conv(producer).map(|p| p.filters).unwrap_or(0);
                if filters != c.input_channels {
                    violations.push(Violation::ChannelMismatch {
                        producer: producer.clone(),
                        consumer: node.id.clone(),
                        filters,
                        input_channels: c.input_channels,
                    });
                }
            }
        }
    }

    for node in model.nodes() {
        if matches!(node.op, LayerOp::Add) {
            let counts: Vec<usize> = model
                .upstream_convs(&node.id)
                .iter()
                .filter_map(|id| model.conv(id).map(|c| c.filters))
                .collect();
            if counts.windows(2).any(|w| w[0] != w[1]) {
                violations.push(Violation::AddChannelMismatch { add: node.id.clone(), counts });
            }
        }
    }

    for group in model.dependency_groups() {
        let mut counts = Vec::new();
        let mut members = Vec::new();
        let mut broken = false;
        for member in group {
            match model.node(member) {
                None => {
                    violations.push(Violation::GroupUnknownMember(member.clone()));
                    broken = true;
                }
                Some(n) => match n.as_conv() {
                    None => {
                        violations.push(Violation::GroupMemberNotConv(member.clone()));
                        broken = true;
                    }
                    Some(c) => {
                        members.push(member.clone());
                        counts.push(c.filters);
                    }
                },
            }
        }
        if !broken && counts.windows(2).any(|w| w[0] != w[1]) {
            violations.push(Violation::GroupFilterMismatch { members, counts });
        }
    }

    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ModelGraph, ModelSpec};

    fn load(json: &str) -> ModelGraph {
        ModelGraph::from_spec(serde_json::from_str::<ModelSpec>(json).unwrap()).unwrap()
    }

    fn two_conv_chain(b_input_channels: usize) -> ModelGraph {
        load(&format!(
            r#"{{
                "weight_seed": 1,
                "nodes": [
                    {{"id": "in", "kind": "input"}},
                    {{"id": "conv_a", "kind": "conv2d", "filters": 64, "input_channels": 3,
                      "kernel": [3, 3], "stride": [1, 1], "input_spatial": [32, 32]}},
                    {{"id": "conv_b", "kind": "conv2d", "filters": 8, "input_channels": {b_input_channels},
                      "kernel": [1, 1], "stride": [1, 1], "input_spatial": [32, 32]}}
                ],
                "edges": [["in", "conv_a"], ["conv_a", "conv_b"]]
            }}"#
        ))
    }

    #[test]
    fn well_formed_chain_is_clean() {
        assert_eq!(validate_graph(&two_conv_chain(64)), vec![]);
    }

    #[test]
    fn channel_mismatch_reported_once() {
        let violations = validate_graph(&two_conv_chain(60));
        assert_eq!(violations.len(), 1);
        assert!(matches!(
            &violations[0],
            Violation::ChannelMismatch { filters: 64, input_channels: 60, .. }
        ));
    }

    #[test]
    fn cycle_reported_once() {
        let g = load(
            r#"{
                "nodes": [
                    {"id": "a", "kind": "relu"},
                    {"id": "b", "kind": "relu"}
                ],
                "edges": [["a", "b"], ["b", "a"]]
            }"#,
        );
        let violations = validate_graph(&g);
        assert_eq!(violations.len(), 1);
        assert!(matches!(&violations[0], Violation::Cycle(nodes) if nodes.len() == 2));
    }

    #[test]
    fn missing_producer_flagged() {
        let g = load(
            r#"{
                "nodes": [
                    {"id": "a", "kind": "conv2d", "filters": 1, "input_channels": 1,
                     "kernel": [1, 1], "stride": [1, 1], "input_spatial": [4, 4]}
                ],
                "edges": []
            }"#,
        );
        let violations = validate_graph(&g);
        assert!(violations.iter().any(|v| matches!(v, Violation::MissingProducer(_))));
    }

    #[test]
    fn weight_shape_mismatch_flagged() {
        let mut spec: ModelSpec = serde_json::from_str(
            r#"{
                "nodes": [
                    {"id": "in", "kind": "input"},
                    {"id": "c", "kind": "conv2d", "filters": 2, "input_channels": 1,
                     "kernel": [1, 1], "stride": [1, 1], "input_spatial": [4, 4]}
                ],
                "edges": [["in", "c"]]
            }"#,
        )
        .unwrap();
        spec.weights.insert("c".into(), vec![1.0; 5]);
        let g = ModelGraph::from_spec(spec).unwrap();
        let violations = validate_graph(&g);
        assert!(violations.iter().any(|v| matches!(
            v,
            Violation::WeightShapeMismatch { expected: 2, actual: 5, .. }
        )));
    }

    #[test]
    fn unequal_group_filters_flagged() {
        let g = load(
            r#"{
                "nodes": [
                    {"id": "in", "kind": "input"},
                    {"id": "a", "kind": "conv2d", "filters": 4, "input_channels": 3,
                     "kernel": [1, 1], "stride": [1, 1], "input_spatial": [4, 4]},
                    {"id": "b", "kind": "conv2d", "filters": 8, "input_channels": 4,
                     "kernel": [1, 1], "stride": [1, 1], "input_spatial": [4, 4]}
                ],
                "edges": [["in", "a"], ["a", "b"]],
                "dependency_groups": [["a", "b"]]
            }"#,
        );
        let violations = validate_graph(&g);
        assert!(violations.iter().any(|v| matches!(v, Violation::GroupFilterMismatch { .. })));
    }

    #[test]
    fn add_with_unequal_branches_flagged() {
        let g = load(
            r#"{
                "nodes": [
                    {"id": "in", "kind": "input"},
                    {"id": "a", "kind": "conv2d", "filters": 4, "input_channels": 3,
                     "kernel": [1, 1], "stride": [1, 1], "input_spatial": [4, 4]},
                    {"id": "b", "kind": "conv2d", "filters": 8, "input_channels": 3,
                     "kernel": [1, 1], "stride": [1, 1], "input_spatial": [4, 4]},
                    {"id": "sum", "kind": "add"}
                ],
                "edges": [["in", "a"], ["in", "b"], ["a", "sum"], ["b", "sum"]]
            }"#,
        );
        let violations = validate_graph(&g);
        assert!(violations.iter().any(|v| matches!(v, Violation::AddChannelMismatch { .. })));
    }
}
