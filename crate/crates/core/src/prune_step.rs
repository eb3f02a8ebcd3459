//! Minimum structure-preserving prune step.
//!
//! The fastest program arranges a task's filters as the product of its split
//! factors, per axis. Shrinking one position of that arrangement removes
//! `product / factor` filters, so the fewest filters removable on an axis
//! while keeping its split shape is `product / max(factor)`. Both filter
//! axes must keep their shape at once, hence the step is the least common
//! multiple of the two per-axis minima.

use num::integer::lcm;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{Task, TaskId};
use crate::tuner::Program;

/// The pruning decision for one task in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub task_id: TaskId,
    /// Minimum filters per prune for the task's fastest program.
    pub step: usize,
    /// Filters to prune this iteration (a positive multiple of `step`).
    pub count: usize,
    /// Filter count after pruning; never below one step.
    pub remaining_after: usize,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("program has an empty split list")]
    EmptySplits,
    #[error("task {task} with {filters} filters cannot prune a full step of {step}")]
    TaskExhausted { task: TaskId, filters: usize, step: usize },
}

fn axis_step(splits: &[usize]) -> Result<usize, StepError> {
    if splits.is_empty() {
        return Err(StepError::EmptySplits);
    }
    let product: usize = splits.iter().product();
    let max = *splits.iter().max().unwrap();
    Ok(product / max)
}

/// Fewest filters prunable while the program's split structure stays
/// realizable on both filter axes: `lcm(prod(ff)/max(ff), prod(ax3)/max(ax3))`.
/// Spatial (`aux`) iterators do not participate.
pub fn min_prune_step(program: &Program) -> Result<usize, StepError> {
    Ok(lcm(axis_step(&program.ff_splits)?, axis_step(&program.ax3_splits)?))
}

/// Choose the prune count for an iteration: `multiplier` steps, clamped down
/// to the largest multiple that keeps at least one step's worth of filters.
/// Errors with [`StepError::TaskExhausted`] when not even one step fits.
pub fn decide_prune_count(
    task: &Task,
    program: &Program,
    multiplier: usize,
) -> Result<PruneDecision, StepError> {
    assert!(multiplier >= 1, "multiplier must be at least 1");
    let step = min_prune_step(program)?;
    let filters = task.signature.filters;
    if filters < 2 * step {
        return Err(StepError::TaskExhausted { task: task.id, filters, step });
    }
    let max_multiple = filters / step - 1;
    let count = multiplier.min(max_multiple) * step;
    Ok(PruneDecision { task_id: task.id, step, count, remaining_after: filters - count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::FusedOps;
    use crate::tasks::TaskSignature;
    use std::collections::BTreeSet;

    fn program(ff: &[usize], ax3: &[usize]) -> Program {
        Program { ff_splits: ff.to_vec(), ax3_splits: ax3.to_vec(), aux_splits: None, latency: None }
    }

    fn task(filters: usize) -> Task {
        Task {
            id: TaskId(1),
            signature: TaskSignature {
                input_channels: 8,
                input_spatial: (7, 7),
                kernel: (3, 3),
                stride: (1, 1),
                filters,
                fused: FusedOps::default(),
            },
            subgraph_ids: BTreeSet::new(),
            fastest_program: None,
        }
    }

    #[test]
    fn step_for_three_way_splits() {
        let p = program(&[4, 8, 16], &[4, 8, 16]);
        assert_eq!(min_prune_step(&p).unwrap(), 32);
    }

    #[test]
    fn step_for_lopsided_splits() {
        let p = program(&[4, 128], &[512, 1]);
        assert_eq!(min_prune_step(&p).unwrap(), 4);
    }

    #[test]
    fn unsplit_axes_step_is_one() {
        let p = program(&[512], &[512]);
        assert_eq!(min_prune_step(&p).unwrap(), 1);
    }

    #[test]
    fn empty_axis_rejected() {
        let p = program(&[], &[8]);
        assert!(matches!(min_prune_step(&p), Err(StepError::EmptySplits)));
    }

    #[test]
    fn decide_one_step() {
        let d = decide_prune_count(&task(512), &program(&[4, 8, 16], &[4, 8, 16]), 1).unwrap();
        assert_eq!(d.step, 32);
        assert_eq!(d.count, 32);
        assert_eq!(d.remaining_after, 480);
    }

    #[test]
    fn decide_exhausted_when_one_step_does_not_fit() {
        // prod/max is 32 on both axes; 40 filters: 40 - 32 = 8 < 32
        let err = decide_prune_count(&task(40), &program(&[32, 64], &[32, 64]), 2).unwrap_err();
        assert!(matches!(err, StepError::TaskExhausted { filters: 40, step: 32, .. }));
    }

    #[test]
    fn decide_clamps_to_keep_one_step() {
        let d = decide_prune_count(&task(96), &program(&[32, 64], &[32, 64]), 2).unwrap();
        assert_eq!(d.step, 32);
        assert_eq!(d.count, 64);
        assert_eq!(d.remaining_after, 32);
        // a larger multiplier clamps to the same count
        let d = decide_prune_count(&task(96), &program(&[32, 64], &[32, 64]), 10).unwrap();
        assert_eq!(d.count, 64);
    }

    #[test]
    fn count_is_always_a_step_multiple() {
        for filters in [64usize, 96, 100, 512] {
            for mult in 1..=4 {
                if let Ok(d) = decide_prune_count(&task(filters), &program(&[2, 8], &[4, 4]), mult)
                {
                    assert_eq!(d.count % d.step, 0);
                    assert!(d.remaining_after >= d.step);
                }
            }
        }
    }

    #[test]
    fn structure_preserved_after_one_step() {
        // pruning exactly one step shrinks the max factor by one
        let splits = [4usize, 8, 16];
        let product: usize = splits.iter().product();
        let step = product / 16;
        let reduced = [4usize, 8, 15];
        assert_eq!(reduced.iter().product::<usize>(), product - step);
    }
}
