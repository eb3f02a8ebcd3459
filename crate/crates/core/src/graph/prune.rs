//! Structured filter pruning.
//!
//! Pruning removes whole filters from targeted conv layers and the matching
//! input-channel slices from every downstream conv, so channel-count
//! invariants keep holding. Conv layers joined by an add (residual main and
//! shortcut branches) live in a dependency group and must be pruned together
//! with the same count; each member ranks its own filters.
//!
//! Input-channel removal is aligned by rank position: a consumer conv drops
//! the channel indices pruned from its nearest upstream conv along the
//! first-listed producer path (see [`ModelGraph::first_upstream_conv`]), which
//! at a residual join makes the first-listed group member the canonical
//! reference.

use std::collections::{BTreeMap, BTreeSet};

use super::{GraphError, LayerNode, LayerOp, ModelGraph, NodeId};

/// Rank the filters of a conv node ascending by the sum of absolute weights,
/// ties broken by ascending filter index. The first entries are the first to
/// be pruned.
pub fn rank_filters_l1(node: &LayerNode) -> Result<Vec<usize>, GraphError> {
    let conv = node.as_conv().ok_or_else(|| GraphError::NotConv(node.id.clone()))?;
    let sums: Vec<f64> = (0..conv.filters)
        .map(|i| conv.filter_weights(i).iter().map(|w| w.abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..conv.filters).collect();
    order.sort_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Expand `targets` so that every dependency group with a targeted member is
/// fully covered (transitively across overlapping groups).
pub fn dependency_closure(model: &ModelGraph, targets: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
    let mut closed = targets.clone();
    loop {
        let mut grew = false;
        for group in model.dependency_groups() {
            if group.iter().any(|m| closed.contains(m)) {
                for m in group {
                    grew |= closed.insert(m.clone());
                }
            }
        }
        if !grew {
            return closed;
        }
    }
}

/// Remove the `count` lowest-ranked filters from every targeted conv and the
/// corresponding input-channel slices from downstream convs. Returns a new
/// graph; the input is untouched.
///
/// `rankings` must hold a full filter permutation for every target (see
/// [`rank_filters_l1`]). A `count` of zero returns an identical clone.
pub fn apply_pruning(
    model: &ModelGraph,
    targets: &BTreeSet<NodeId>,
    count: usize,
    rankings: &BTreeMap<NodeId, Vec<usize>>,
) -> Result<ModelGraph, GraphError> {
    for target in targets {
        let node = model.node(target).ok_or_else(|| GraphError::UnknownNode(target.clone()))?;
        let conv = node.as_conv().ok_or_else(|| GraphError::NotConv(target.clone()))?;
        if count >= conv.filters {
            return Err(GraphError::CountTooLarge {
                node: target.clone(),
                filters: conv.filters,
                count,
            });
        }
        let ranking = rankings.get(target).ok_or_else(|| GraphError::BadRanking(target.clone()))?;
        let mut check: Vec<usize> = ranking.clone();
        check.sort_unstable();
        if check != (0..conv.filters).collect::<Vec<_>>() {
            return Err(GraphError::BadRanking(target.clone()));
        }
    }
    for group in model.dependency_groups() {
        if group.iter().any(|m| targets.contains(m)) {
            for member in group {
                if !targets.contains(member) {
                    let hit = group.iter().find(|m| targets.contains(*m)).unwrap();
                    return Err(GraphError::GroupNotCovered {
                        node: hit.clone(),
                        missing: member.clone(),
                    });
                }
            }
        }
    }

    if count == 0 {
        return Ok(model.clone());
    }

    let pruned: BTreeMap<NodeId, BTreeSet<usize>> = targets
        .iter()
        .map(|t| (t.clone(), rankings[t][..count].iter().copied().collect()))
        .collect();

    let nodes = model
        .nodes()
        .iter()
        .map(|node| {
            let conv = match node.as_conv() {
                Some(c) => c,
                None => return node.clone(),
            };
            let dropped_filters = pruned.get(&node.id);
            let dropped_inputs = model
                .first_upstream_conv(&node.id)
                .and_then(|reference| pruned.get(reference));
            if dropped_filters.is_none() && dropped_inputs.is_none() {
                return node.clone();
            }

            let kh_kw = conv.kernel.0 * conv.kernel.1;
            let per_filter = conv.input_channels * kh_kw;
            let mut weights = Vec::new();
            for f in 0..conv.filters {
                if dropped_filters.is_some_and(|set| set.contains(&f)) {
                    continue;
                }
                let block = &conv.weights[f * per_filter..(f + 1) * per_filter];
                match dropped_inputs {
                    None => weights.extend_from_slice(block),
                    Some(drop) => {
                        for ci in 0..conv.input_channels {
                            if !drop.contains(&ci) {
                                weights.extend_from_slice(&block[ci * kh_kw..(ci + 1) * kh_kw]);
                            }
                        }
                    }
                }
            }

            let mut new_conv = conv.clone();
            new_conv.weights = weights;
            if dropped_filters.is_some() {
                new_conv.filters -= count;
            }
            if dropped_inputs.is_some() {
                new_conv.input_channels -= count;
            }
            LayerNode { id: node.id.clone(), op: LayerOp::Conv2d(new_conv) }
        })
        .collect();

    Ok(ModelGraph::new(
        nodes,
        model.edges().to_vec(),
        model.dependency_groups().to_vec(),
        model.weight_seed(),
    ))
}
