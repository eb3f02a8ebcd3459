//! Task deduplication and ordering.
//!
//! Subgraphs with identical structural signatures (shape tuple plus fused-op
//! flags, weights excluded) compile to the same code and collapse into one
//! task. The task table maps every subgraph to its task and, once tuned,
//! carries each task's fastest program. Tasks are prioritized for pruning by
//! impact: latency times the number of associated subgraphs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::graph::{FusedOps, Subgraph, SubgraphId};
use crate::tuner::Program;

/// Identifier of a task, displayed as `T1`, `T2`, …
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl Serialize for TaskId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let digits = s
            .strip_prefix('T')
            .ok_or_else(|| D::Error::custom(format!("task id `{s}` must look like `T7`")))?;
        digits
            .parse()
            .map(TaskId)
            .map_err(|_| D::Error::custom(format!("task id `{s}` must look like `T7`")))
    }
}

/// The structural tuple that determines compiled-code identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskSignature {
    pub input_channels: usize,
    pub input_spatial: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub filters: usize,
    pub fused: FusedOps,
}

impl From<&Subgraph> for TaskSignature {
    fn from(s: &Subgraph) -> Self {
        TaskSignature {
            input_channels: s.shape.input_channels,
            input_spatial: s.shape.input_spatial,
            kernel: s.shape.kernel,
            stride: s.shape.stride,
            filters: s.shape.filters,
            fused: s.fused,
        }
    }
}

/// One equivalence class of subgraphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub signature: TaskSignature,
    pub subgraph_ids: BTreeSet<SubgraphId>,
    pub fastest_program: Option<Program>,
}

impl Task {
    /// Estimated latency of the fastest program, once tuned.
    pub fn latency(&self) -> Option<f64> {
        self.fastest_program.as_ref().and_then(|p| p.latency)
    }
}

/// The task/subgraph table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTable {
    pub tasks: Vec<Task>,
    pub subgraph_to_task: BTreeMap<SubgraphId, TaskId>,
}

impl TaskTable {
    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn is_tuned(&self) -> bool {
        self.tasks.iter().all(|t| t.latency().is_some())
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("duplicate subgraph id {0}")]
    DuplicateSubgraph(SubgraphId),
    #[error("cannot extract tasks from an empty subgraph list")]
    NoSubgraphs,
    #[error("task {0} has not been tuned")]
    Untuned(TaskId),
}

/// Group subgraphs into tasks by signature equality. Task ids are assigned in
/// first-appearance order; fastest programs are left unset for the tuner.
pub fn extract_tasks(subgraphs: &[Subgraph]) -> Result<TaskTable, TaskError> {
    if subgraphs.is_empty() {
        return Err(TaskError::NoSubgraphs);
    }
    let mut table = TaskTable::default();
    let mut by_signature: HashMap<TaskSignature, usize> = HashMap::new();
    for sub in subgraphs {
        if table.subgraph_to_task.contains_key(&sub.id) {
            return Err(TaskError::DuplicateSubgraph(sub.id));
        }
        let signature = TaskSignature::from(sub);
        let slot = *by_signature.entry(signature).or_insert_with(|| {
            table.tasks.push(Task {
                id: TaskId(table.tasks.len() as u32 + 1),
                signature,
                subgraph_ids: BTreeSet::new(),
                fastest_program: None,
            });
            table.tasks.len() - 1
        });
        table.tasks[slot].subgraph_ids.insert(sub.id);
        table.subgraph_to_task.insert(sub.id, table.tasks[slot].id);
    }
    Ok(table)
}

/// Pruning impact: the task's latency times the number of subgraphs sharing
/// it. The higher the impact, the more a prune of this task can move the
/// whole model's latency.
pub fn pruning_impact(task: &Task) -> Result<f64, TaskError> {
    let latency = task.latency().ok_or(TaskError::Untuned(task.id))?;
    Ok(latency * task.subgraph_ids.len() as f64)
}

/// Task ids sorted by descending pruning impact, ties broken by ascending id.
pub fn order_tasks(table: &TaskTable) -> Result<Vec<TaskId>, TaskError> {
    let mut with_impact: Vec<(TaskId, f64)> =
        table.tasks.iter().map(|t| Ok((t.id, pruning_impact(t)?))).collect::<Result<_, _>>()?;
    with_impact.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(with_impact.into_iter().map(|(id, _)| id).collect())
}

/// Serialization view of a tuned table: one row per task with its latency,
/// impact, and fastest-program splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskTableExport {
    pub tasks: Vec<TaskExport>,
    pub subgraph_to_task: BTreeMap<SubgraphId, TaskId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskExport {
    pub id: TaskId,
    pub signature: TaskSignature,
    pub subgraph_ids: Vec<SubgraphId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff_splits: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ax3_splits: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impact: Option<f64>,
}

impl From<&TaskTable> for TaskTableExport {
    fn from(table: &TaskTable) -> Self {
        TaskTableExport {
            tasks: table
                .tasks
                .iter()
                .map(|t| TaskExport {
                    id: t.id,
                    signature: t.signature,
                    subgraph_ids: t.subgraph_ids.iter().copied().collect(),
                    ff_splits: t.fastest_program.as_ref().map(|p| p.ff_splits.clone()),
                    ax3_splits: t.fastest_program.as_ref().map(|p| p.ax3_splits.clone()),
                    latency: t.latency(),
                    impact: pruning_impact(t).ok(),
                })
                .collect(),
            subgraph_to_task: table.subgraph_to_task.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ShapeSummary, Subgraph};

    fn subgraph(id: u32, filters: usize, has_bn: bool) -> Subgraph {
        Subgraph {
            id: SubgraphId(id),
            anchor_conv: format!("c{id}").as_str().into(),
            fused: FusedOps { has_bn, has_relu: true, has_add: false },
            shape: ShapeSummary {
                input_channels: 16,
                input_spatial: (8, 8),
                kernel: (3, 3),
                stride: (1, 1),
                filters,
            },
        }
    }

    fn tuned(id: u32, latency: f64, subgraphs: &[u32]) -> Task {
        Task {
            id: TaskId(id),
            signature: TaskSignature::from(&subgraph(1, 8, true)),
            subgraph_ids: subgraphs.iter().map(|&s| SubgraphId(s)).collect(),
            fastest_program: Some(Program {
                ff_splits: vec![8],
                ax3_splits: vec![8],
                aux_splits: None,
                latency: Some(latency),
            }),
        }
    }

    #[test]
    fn identical_subgraphs_share_a_task() {
        let subs = vec![subgraph(1, 8, true), subgraph(2, 8, true)];
        let table = extract_tasks(&subs).unwrap();
        assert_eq!(table.tasks.len(), 1);
        assert_eq!(table.tasks[0].subgraph_ids.len(), 2);
        assert_eq!(table.subgraph_to_task[&SubgraphId(1)], table.subgraph_to_task[&SubgraphId(2)]);
    }

    #[test]
    fn distinct_signatures_get_distinct_tasks() {
        let subs = vec![subgraph(1, 8, true), subgraph(2, 8, false), subgraph(3, 4, true)];
        let table = extract_tasks(&subs).unwrap();
        assert_eq!(table.tasks.len(), 3);
        assert_eq!(table.tasks[0].id, TaskId(1));
        assert_eq!(table.tasks[2].id, TaskId(3));
    }

    #[test]
    fn duplicate_subgraph_id_rejected() {
        let subs = vec![subgraph(1, 8, true), subgraph(1, 4, true)];
        assert!(matches!(extract_tasks(&subs), Err(TaskError::DuplicateSubgraph(_))));
    }

    #[test]
    fn extraction_is_idempotent() {
        let subs = vec![subgraph(1, 8, true), subgraph(2, 8, true), subgraph(3, 4, false)];
        let a = extract_tasks(&subs).unwrap();
        let b = extract_tasks(&subs).unwrap();
        assert_eq!(a, b);
        let total: usize = a.tasks.iter().map(|t| t.subgraph_ids.len()).sum();
        assert_eq!(total, subs.len());
    }

    #[test]
    fn impact_is_latency_times_subgraph_count() {
        assert_eq!(pruning_impact(&tuned(1, 0.954e-3, &[1, 2])).unwrap(), 0.954e-3 * 2.0);
        assert_eq!(pruning_impact(&tuned(2, 0.473e-3, &[1, 2, 3])).unwrap(), 0.473e-3 * 3.0);
        assert_eq!(pruning_impact(&tuned(3, 0.0, &[1, 2, 3, 4])).unwrap(), 0.0);
    }

    #[test]
    fn impact_requires_tuning() {
        let mut task = tuned(1, 1.0, &[1]);
        task.fastest_program = None;
        assert!(matches!(pruning_impact(&task), Err(TaskError::Untuned(_))));
    }

    #[test]
    fn ordering_is_descending_impact() {
        let table = TaskTable {
            tasks: vec![
                tuned(1, 0.954e-3, &[1, 2]),
                tuned(2, 0.473e-3, &[3, 4, 5]),
                tuned(3, 1.632e-3, &[6]),
            ],
            subgraph_to_task: BTreeMap::new(),
        };
        assert_eq!(order_tasks(&table).unwrap(), vec![TaskId(1), TaskId(3), TaskId(2)]);
    }

    #[test]
    fn ordering_single_task() {
        let table =
            TaskTable { tasks: vec![tuned(1, 1.0, &[1])], subgraph_to_task: BTreeMap::new() };
        assert_eq!(order_tasks(&table).unwrap(), vec![TaskId(1)]);
    }

    #[test]
    fn ordering_ties_break_by_ascending_id() {
        let table = TaskTable {
            tasks: vec![tuned(2, 1.0, &[1]), tuned(1, 1.0, &[2])],
            subgraph_to_task: BTreeMap::new(),
        };
        assert_eq!(order_tasks(&table).unwrap(), vec![TaskId(1), TaskId(2)]);
    }

    #[test]
    fn task_id_serde_round_trip() {
        let json = serde_json::to_string(&TaskId(7)).unwrap();
        assert_eq!(json, "\"T7\"");
        assert_eq!(serde_json::from_str::<TaskId>(&json).unwrap(), TaskId(7));
    }
}
