//! trimtune: joint structured-filter pruning and loop-schedule tuning.
//!
//! The engine partitions a layered DNN graph into conv-anchored subgraphs,
//! deduplicates them into tasks by structural signature, tunes each task by
//! searching loop-split schedules under an analytical device cost model, and
//! iteratively prunes the subgraphs of the highest-impact task by the minimum
//! step that preserves the fastest schedule's split structure, subject to an
//! accuracy floor.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`graph`] — the model IR, validation, subgraph partitioning, and the
//!   structured pruning transform.
//! * [`tasks`] — subgraph deduplication into tasks, pruning impact, and the
//!   prioritized task list.
//! * [`tuner`] — schedule enumeration and the analytical latency cost model.
//! * [`prune_step`] — the minimum structure-preserving prune step (LCM rule).
//! * [`oracle`] — pluggable accuracy oracles (synthetic and subprocess).
//! * [`orchestrator`] — the prune/tune/accept loop tying it all together.

pub mod graph;
pub mod oracle;
pub mod orchestrator;
pub mod prune_step;
pub mod tasks;
pub mod tuner;

pub use graph::{ModelGraph, NodeId};
pub use orchestrator::{Engine, PruneState, RunOutcome, Settings, TraceRecord};
pub use tasks::{Task, TaskId, TaskTable};
pub use tuner::{DeviceProfile, Program, TunerConfig};
