//! The prune/tune/accept loop.
//!
//! [`Engine::initialize`] partitions and tunes the unpruned model, scores its
//! baseline accuracy, and sets the first latency target. [`Engine::run`] then
//! iterates: walk the prioritized task list, prune each candidate task's
//! subgraphs (plus dependency-group members) by the minimum structure-
//! preserving step, re-partition, re-tune, and re-measure; commit the first
//! candidate that beats the latency target while staying above the accuracy
//! floor. A task whose candidate misses the accuracy floor is dropped from
//! the current list; a task too small to prune one step is dropped likewise.
//! The loop exits when the committed accuracy falls to the goal, the list
//! empties, or a full pass neither commits nor drops anything (no further
//! progress is possible without a state change).
//!
//! Every attempt appends one [`TraceRecord`]; reruns with identical inputs
//! reproduce the trace exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    apply_pruning, dependency_closure, partition_subgraphs, rank_filters_l1, GraphError,
    ModelGraph, NodeId, Subgraph,
};
use crate::oracle::{AccuracyOracle, OracleError, OracleMode};
use crate::prune_step::{decide_prune_count, StepError};
use crate::tasks::{extract_tasks, order_tasks, TaskError, TaskId, TaskSignature, TaskTable};
use crate::tuner::{model_latency, tune_task, DeviceProfile, Program, TuneError, TunerConfig};

/// Run-wide knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// Goal accuracy: the loop keeps pruning while the committed accuracy
    /// stays above this.
    pub goal_accuracy: f64,
    /// Accuracy-retention ratio per acceptance, in (0, 1].
    pub alpha: f64,
    /// Latency-target ratio for the next iteration, in (0, 1).
    pub beta: f64,
    /// Prune steps attempted per decision.
    pub multiplier: usize,
    pub tuner: TunerConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            goal_accuracy: 0.5,
            alpha: 0.95,
            beta: 0.97,
            multiplier: 1,
            tuner: TunerConfig::default(),
        }
    }
}

/// Loop state between iterations.
#[derive(Debug, Clone)]
pub struct PruneState {
    pub model: ModelGraph,
    pub subgraphs: Vec<Subgraph>,
    pub table: TaskTable,
    /// Prioritized task list for the current model.
    pub ordered_tasks: Vec<TaskId>,
    /// Latency target the next committed candidate must beat.
    pub target_latency: f64,
    /// Accuracy of the last committed model.
    pub best_accuracy: f64,
    pub goal_accuracy: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Completed while-loop passes.
    pub iteration: u64,
    /// Latency of the tuned, unpruned model.
    pub initial_latency: f64,
    /// Accuracy of the unpruned model.
    pub initial_accuracy: f64,
}

/// Outcome of one pruning attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    RejectedLatency,
    RejectedAccuracyTaskRemoved,
    ExhaustedTaskRemoved,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Outcome::Accepted => "accepted",
            Outcome::RejectedLatency => "rejected_latency",
            Outcome::RejectedAccuracyTaskRemoved => "rejected_accuracy_task_removed",
            Outcome::ExhaustedTaskRemoved => "exhausted_task_removed",
        };
        f.write_str(s)
    }
}

/// One line of the audit log, emitted per pruning attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub candidate_task: TaskId,
    /// Minimum prune step of the candidate's fastest program.
    pub step: Option<usize>,
    /// Filters pruned per targeted conv.
    pub count: Option<usize>,
    /// Estimated latency of the pruned candidate model.
    pub measured_latency: Option<f64>,
    /// Short-term accuracy of the pruned candidate model.
    pub short_term_accuracy: Option<f64>,
    pub outcome: Outcome,
}

/// Where trace records go as they happen. The engine also returns the full
/// trace in its [`RunOutcome`].
pub trait TraceSink {
    fn record(&mut self, record: &TraceRecord) -> std::io::Result<()>;
}

/// Discards records.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _record: &TraceRecord) -> std::io::Result<()> {
        Ok(())
    }
}

/// Final result of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ModelGraph,
    pub table: TaskTable,
    pub trace: Vec<TraceRecord>,
    pub initial_latency: f64,
    pub final_latency: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// While-loop passes executed.
    pub iterations: u64,
    /// Committed prunes.
    pub accepted: u64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("failed to write trace record: {0}")]
    Trace(#[source] std::io::Error),
}

/// Owns the device profile, the oracle, and the tuning memo; drives the loop.
pub struct Engine<O: AccuracyOracle> {
    profile: DeviceProfile,
    oracle: O,
    settings: Settings,
    /// Fastest programs by signature. Tuning is deterministic per signature
    /// and profile, so memoized results are indistinguishable from fresh ones.
    memo: HashMap<TaskSignature, Program>,
}

impl<O: AccuracyOracle> Engine<O> {
    pub fn new(profile: DeviceProfile, oracle: O, settings: Settings) -> Self {
        Engine { profile, oracle, settings, memo: HashMap::new() }
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn oracle(&self) -> &O {
        &self.oracle
    }

    fn validate_settings(&self) -> Result<(), RunError> {
        let s = &self.settings;
        if !(s.goal_accuracy > 0.0 && s.goal_accuracy < 1.0) {
            return Err(RunError::InvalidSettings(format!(
                "goal_accuracy {} must be in (0, 1)",
                s.goal_accuracy
            )));
        }
        if !(s.alpha > 0.0 && s.alpha <= 1.0) {
            return Err(RunError::InvalidSettings(format!("alpha {} must be in (0, 1]", s.alpha)));
        }
        if !(s.beta > 0.0 && s.beta < 1.0) {
            return Err(RunError::InvalidSettings(format!("beta {} must be in (0, 1)", s.beta)));
        }
        if s.multiplier == 0 {
            return Err(RunError::InvalidSettings("multiplier must be at least 1".into()));
        }
        Ok(())
    }

    fn tune_all(&mut self, table: &mut TaskTable) -> Result<(), RunError> {
        for task in &mut table.tasks {
            let program = match self.memo.get(&task.signature) {
                Some(p) => p.clone(),
                None => {
                    let p = tune_task(task, &self.profile, &self.settings.tuner)?;
                    self.memo.insert(task.signature, p.clone());
                    p
                }
            };
            task.fastest_program = Some(program);
        }
        Ok(())
    }

    /// Partition, extract tasks, tune everything, score the baseline
    /// accuracy, and set the first latency target.
    pub fn initialize(&mut self, model: ModelGraph) -> Result<PruneState, RunError> {
        self.validate_settings()?;
        let subgraphs = partition_subgraphs(&model)?;
        let mut table = extract_tasks(&subgraphs)?;
        self.tune_all(&mut table)?;
        let ordered_tasks = order_tasks(&table)?;
        let initial_latency = model_latency(&table)?;
        let initial_accuracy = self.oracle.evaluate(&model, OracleMode::Short)?;
        log::info!(
            "initialized: {} subgraphs, {} tasks, latency {:.3e}s, accuracy {:.4}",
            subgraphs.len(),
            table.tasks.len(),
            initial_latency,
            initial_accuracy
        );
        Ok(PruneState {
            model,
            subgraphs,
            table,
            ordered_tasks,
            target_latency: self.settings.beta * initial_latency,
            best_accuracy: initial_accuracy,
            goal_accuracy: self.settings.goal_accuracy,
            alpha: self.settings.alpha,
            beta: self.settings.beta,
            iteration: 0,
            initial_latency,
            initial_accuracy,
        })
    }

    /// Run the loop to completion, then evaluate the final accuracy and
    /// re-tune the final model.
    pub fn run(
        &mut self,
        mut state: PruneState,
        sink: &mut dyn TraceSink,
    ) -> Result<RunOutcome, RunError> {
        let mut trace: Vec<TraceRecord> = Vec::new();
        let mut accepted = 0u64;

        'passes: while state.best_accuracy > state.goal_accuracy && !state.ordered_tasks.is_empty()
        {
            state.iteration += 1;
            let mut committed = false;
            let mut progressed = false;

            for candidate_id in state.ordered_tasks.clone() {
                let task = state
                    .table
                    .task(candidate_id)
                    .expect("ordered task ids come from the table")
                    .clone();
                let program =
                    task.fastest_program.clone().ok_or(TaskError::Untuned(candidate_id))?;

                let decision =
                    match decide_prune_count(&task, &program, self.settings.multiplier) {
                        Ok(d) => d,
                        Err(StepError::TaskExhausted { step, .. }) => {
                            state.ordered_tasks.retain(|&t| t != candidate_id);
                            progressed = true;
                            let record = TraceRecord {
                                iteration: state.iteration,
                                candidate_task: candidate_id,
                                step: Some(step),
                                count: None,
                                measured_latency: None,
                                short_term_accuracy: None,
                                outcome: Outcome::ExhaustedTaskRemoved,
                            };
                            sink.record(&record).map_err(RunError::Trace)?;
                            trace.push(record);
                            continue;
                        }
                        Err(e) => return Err(e.into()),
                    };

                // all subgraphs of the task, plus their dependency groups
                let anchors: BTreeSet<NodeId> = state
                    .subgraphs
                    .iter()
                    .filter(|s| task.subgraph_ids.contains(&s.id))
                    .map(|s| s.anchor_conv.clone())
                    .collect();
                let targets = dependency_closure(&state.model, &anchors);
                let rankings: BTreeMap<NodeId, Vec<usize>> = targets
                    .iter()
                    .map(|t| {
                        let node = state.model.node(t).ok_or(GraphError::UnknownNode(t.clone()))?;
                        Ok((t.clone(), rank_filters_l1(node)?))
                    })
                    .collect::<Result<_, GraphError>>()?;

                let candidate_model =
                    apply_pruning(&state.model, &targets, decision.count, &rankings)?;
                let candidate_subgraphs = partition_subgraphs(&candidate_model)?;
                let mut candidate_table = extract_tasks(&candidate_subgraphs)?;
                self.tune_all(&mut candidate_table)?;
                let candidate_order = order_tasks(&candidate_table)?;
                let measured = model_latency(&candidate_table)?;

                if measured >= state.target_latency {
                    let record = TraceRecord {
                        iteration: state.iteration,
                        candidate_task: candidate_id,
                        step: Some(decision.step),
                        count: Some(decision.count),
                        measured_latency: Some(measured),
                        short_term_accuracy: None,
                        outcome: Outcome::RejectedLatency,
                    };
                    sink.record(&record).map_err(RunError::Trace)?;
                    trace.push(record);
                    continue;
                }

                let short_term = self.oracle.evaluate(&candidate_model, OracleMode::Short)?;
                if short_term < state.alpha * state.best_accuracy {
                    state.ordered_tasks.retain(|&t| t != candidate_id);
                    progressed = true;
                    let record = TraceRecord {
                        iteration: state.iteration,
                        candidate_task: candidate_id,
                        step: Some(decision.step),
                        count: Some(decision.count),
                        measured_latency: Some(measured),
                        short_term_accuracy: Some(short_term),
                        outcome: Outcome::RejectedAccuracyTaskRemoved,
                    };
                    sink.record(&record).map_err(RunError::Trace)?;
                    trace.push(record);
                    continue;
                }

                log::debug!(
                    "iteration {}: accepted {} (step {}, count {}, latency {:.3e}s, accuracy {:.4})",
                    state.iteration,
                    candidate_id,
                    decision.step,
                    decision.count,
                    measured,
                    short_term
                );
                state.model = candidate_model;
                state.subgraphs = candidate_subgraphs;
                state.table = candidate_table;
                state.ordered_tasks = candidate_order;
                state.target_latency = state.beta * measured;
                state.best_accuracy = short_term;
                accepted += 1;
                committed = true;
                progressed = true;
                let record = TraceRecord {
                    iteration: state.iteration,
                    candidate_task: candidate_id,
                    step: Some(decision.step),
                    count: Some(decision.count),
                    measured_latency: Some(measured),
                    short_term_accuracy: Some(short_term),
                    outcome: Outcome::Accepted,
                };
                sink.record(&record).map_err(RunError::Trace)?;
                trace.push(record);
                break;
            }

            // a pass that neither commits nor drops a task cannot make the
            // next pass any different; stop instead of spinning
            if !committed && !progressed {
                break 'passes;
            }
        }

        let final_accuracy = self.oracle.evaluate(&state.model, OracleMode::Final)?;
        let subgraphs = partition_subgraphs(&state.model)?;
        let mut table = extract_tasks(&subgraphs)?;
        self.tune_all(&mut table)?;
        let final_latency = model_latency(&table)?;

        Ok(RunOutcome {
            model: state.model,
            table,
            trace,
            initial_latency: state.initial_latency,
            final_latency,
            initial_accuracy: state.initial_accuracy,
            final_accuracy,
            iterations: state.iteration,
            accepted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelSpec;
    use crate::oracle::SyntheticOracle;

    fn toy_model() -> ModelGraph {
        let spec: ModelSpec = serde_json::from_str(
            r#"{
                "weight_seed": 21,
                "nodes": [
                    {"id": "in", "kind": "input"},
                    {"id": "c1", "kind": "conv2d", "filters": 8, "input_channels": 3,
                     "kernel": [3, 3], "stride": [1, 1], "input_spatial": [16, 16]},
                    {"id": "bn1", "kind": "batch_norm"},
                    {"id": "r1", "kind": "relu"},
                    {"id": "c2", "kind": "conv2d", "filters": 16, "input_channels": 8,
                     "kernel": [3, 3], "stride": [1, 1], "input_spatial": [16, 16]},
                    {"id": "r2", "kind": "relu"},
                    {"id": "c3", "kind": "conv2d", "filters": 16, "input_channels": 16,
                     "kernel": [1, 1], "stride": [1, 1], "input_spatial": [16, 16]},
                    {"id": "pool", "kind": "pool"},
                    {"id": "fc", "kind": "dense"}
                ],
                "edges": [["in", "c1"], ["c1", "bn1"], ["bn1", "r1"], ["r1", "c2"],
                          ["c2", "r2"], ["r2", "c3"], ["c3", "pool"], ["pool", "fc"]]
            }"#,
        )
        .unwrap();
        ModelGraph::from_spec(spec).unwrap()
    }

    fn profile() -> DeviceProfile {
        DeviceProfile {
            name: "test".into(),
            cores: 4,
            vector_width: 8,
            l1_bytes: 64 * 1024,
            mac_cost: 2.5e-11,
            parallel_overhead: 2.0e-6,
            tile_penalty: 1.3,
        }
    }

    fn engine(model: &ModelGraph, settings: Settings, kappa: f64) -> Engine<SyntheticOracle> {
        Engine::new(profile(), SyntheticOracle::new(model, 0.92, kappa), settings)
    }

    #[test]
    fn initialize_builds_sorted_task_list() {
        let model = toy_model();
        let mut engine = engine(&model, Settings::default(), 0.1);
        let state = engine.initialize(model).unwrap();
        assert_eq!(state.table.tasks.len(), 3);
        assert_eq!(state.ordered_tasks.len(), 3);
        assert_eq!(state.best_accuracy, 0.92);
        assert!(state.target_latency < state.initial_latency);
        // descending impact
        let impacts: Vec<f64> = state
            .ordered_tasks
            .iter()
            .map(|&id| crate::tasks::pruning_impact(state.table.task(id).unwrap()).unwrap())
            .collect();
        for pair in impacts.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn goal_above_baseline_skips_the_loop() {
        let model = toy_model();
        let settings = Settings { goal_accuracy: 0.99, ..Settings::default() };
        let mut engine = engine(&model, settings, 0.1);
        let state = engine.initialize(model.clone()).unwrap();
        let outcome = engine.run(state, &mut NullSink).unwrap();
        assert!(outcome.trace.is_empty());
        assert_eq!(outcome.accepted, 0);
        assert_eq!(outcome.model, model);
        assert_eq!(outcome.final_latency, outcome.initial_latency);
    }

    #[test]
    fn zero_penalty_prunes_until_nothing_fits() {
        let model = toy_model();
        let settings = Settings { goal_accuracy: 0.5, ..Settings::default() };
        let mut engine = engine(&model, settings, 0.0);
        let state = engine.initialize(model).unwrap();
        let outcome = engine.run(state, &mut NullSink).unwrap();
        assert!(outcome.accepted > 0);
        assert!(outcome.final_latency <= outcome.initial_latency);
        // accuracy never dropped, so no task was removed for accuracy
        assert!(outcome
            .trace
            .iter()
            .all(|r| r.outcome != Outcome::RejectedAccuracyTaskRemoved));
    }

    #[test]
    fn infinite_penalty_rejects_everything() {
        let model = toy_model();
        // beta close to 1 so every candidate reaches the accuracy check
        let settings = Settings { goal_accuracy: 0.5, beta: 0.999, ..Settings::default() };
        let mut engine = engine(&model, settings, 1000.0);
        let state = engine.initialize(model.clone()).unwrap();
        let outcome = engine.run(state, &mut NullSink).unwrap();
        assert_eq!(outcome.accepted, 0);
        assert_eq!(outcome.model, model);
        assert!(!outcome.trace.is_empty());
        assert!(outcome
            .trace
            .iter()
            .all(|r| r.outcome == Outcome::RejectedAccuracyTaskRemoved));
        // every task got removed in the single pass
        assert_eq!(outcome.trace.len(), 3);
    }

    #[test]
    fn committed_latencies_strictly_decrease() {
        let model = toy_model();
        let mut engine = engine(&model, Settings::default(), 0.05);
        let state = engine.initialize(model).unwrap();
        let outcome = engine.run(state, &mut NullSink).unwrap();
        let committed: Vec<f64> = outcome
            .trace
            .iter()
            .filter(|r| r.outcome == Outcome::Accepted)
            .map(|r| r.measured_latency.unwrap())
            .collect();
        assert!(!committed.is_empty());
        for pair in committed.windows(2) {
            assert!(pair[1] < pair[0]);
        }
        assert!(committed[0] < outcome.initial_latency);
    }

    #[test]
    fn acceptances_respect_the_accuracy_floor() {
        let model = toy_model();
        let mut engine = engine(&model, Settings::default(), 0.05);
        let state = engine.initialize(model).unwrap();
        let alpha = engine.settings().alpha;
        let outcome = engine.run(state, &mut NullSink).unwrap();
        let mut best = outcome.initial_accuracy;
        for record in &outcome.trace {
            if record.outcome == Outcome::Accepted {
                let a = record.short_term_accuracy.unwrap();
                assert!(a >= alpha * best);
                best = a;
            }
        }
    }

    #[test]
    fn replay_is_exact() {
        let model = toy_model();
        let run = |m: &ModelGraph| {
            let mut engine = engine(m, Settings::default(), 0.05);
            let state = engine.initialize(m.clone()).unwrap();
            engine.run(state, &mut NullSink).unwrap()
        };
        let a = run(&model);
        let b = run(&model);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.final_latency, b.final_latency);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn settings_are_validated() {
        let model = toy_model();
        for bad in [
            Settings { goal_accuracy: 0.0, ..Settings::default() },
            Settings { alpha: 1.5, ..Settings::default() },
            Settings { beta: 1.0, ..Settings::default() },
            Settings { multiplier: 0, ..Settings::default() },
        ] {
            let mut engine = engine(&model, bad, 0.1);
            assert!(matches!(
                engine.initialize(model.clone()),
                Err(RunError::InvalidSettings(_))
            ));
        }
    }
}
