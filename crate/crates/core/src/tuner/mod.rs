//! Schedule enumeration and selection.
//!
//! A schedule (program) for a conv task is a pair of ordered split-factor
//! lists for the two filter-related iterators, `ff` and `ax3`. The tuner
//! enumerates every ordered factorization of the filter count into at most
//! `max_depth` factors per axis, scores each candidate with the analytical
//! cost model in [`cost`], and keeps the fastest one. Candidates are visited
//! in lexicographic order over `(ff_splits, ax3_splits)` and truncated at the
//! budget, so the selected program is independent of evaluation order.

mod cost;

pub use cost::{estimate_latency, estimate_latency_exact};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{Task, TaskError, TaskTable};

/// A loop-split schedule plus its estimated latency (seconds) once scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub ff_splits: Vec<usize>,
    pub ax3_splits: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_splits: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
}

/// Analytical hardware parameters driving the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub cores: usize,
    pub vector_width: usize,
    pub l1_bytes: usize,
    /// Seconds per multiply-accumulate.
    pub mac_cost: f64,
    /// Seconds per parallel region.
    pub parallel_overhead: f64,
    /// Multiplier applied when an innermost tile is not vector-width aligned
    /// or a tile's weight footprint overflows l1.
    pub tile_penalty: f64,
}

impl DeviceProfile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ProfileError::Io { path: path.to_path_buf(), source })?;
        let profile: DeviceProfile = serde_json::from_str(&text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        for (value, field) in [
            (self.cores as f64, "cores"),
            (self.vector_width as f64, "vector_width"),
            (self.l1_bytes as f64, "l1_bytes"),
            (self.mac_cost, "mac_cost"),
            (self.parallel_overhead, "parallel_overhead"),
            (self.tile_penalty, "tile_penalty"),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ProfileError::NonPositive { field });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid device profile JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("device profile field `{field}` must be positive and finite")]
    NonPositive { field: &'static str },
}

/// Search-space bounds for the tuner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunerConfig {
    /// Maximum number of candidate programs scored per task.
    pub budget: usize,
    /// Maximum number of split factors per axis.
    pub max_depth: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig { budget: 10_000, max_depth: 3 }
    }
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid program: {0}")]
    InvalidProgram(&'static str),
    #[error("tuner budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// All ordered sequences of at most `max_len` factors (each >= 1) whose
/// product is `n`, sorted lexicographically. A filter count of 1 admits no
/// nontrivial split, so it yields the single sequence `[1]` rather than
/// padded variants of it.
pub fn ordered_factorizations(n: usize, max_len: usize) -> Vec<Vec<usize>> {
    assert!(n >= 1, "factor count must be at least 1");
    if n == 1 {
        return vec![vec![1]];
    }
    let divisors: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    fn rec(
        n: usize,
        remaining: usize,
        divisors_of: &dyn Fn(usize) -> Vec<usize>,
        prefix: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if remaining == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for d in divisors_of(n) {
            prefix.push(d);
            rec(n / d, remaining - 1, divisors_of, prefix, out);
            prefix.pop();
        }
    }
    let divisors_of = |m: usize| divisors.iter().copied().filter(|d| m % d == 0).collect();
    for len in 1..=max_len {
        rec(n, len, &divisors_of, &mut prefix, &mut out);
    }
    out.sort();
    out
}

/// Enumerate unscored candidate programs for a task: the cartesian product of
/// per-axis ordered factorizations of the filter count, in lexicographic
/// order over `(ff_splits, ax3_splits)`, truncated at the budget.
pub fn enumerate_schedules(
    task: &Task,
    _profile: &DeviceProfile,
    config: &TunerConfig,
) -> Result<Vec<Program>, TuneError> {
    if config.budget == 0 {
        return Err(TuneError::ZeroBudget);
    }
    let filters = task.signature.filters;
    let per_axis = ordered_factorizations(filters, config.max_depth.max(1));
    let mut programs = Vec::with_capacity(config.budget.min(per_axis.len() * per_axis.len()));
    'outer: for ff in &per_axis {
        for ax3 in &per_axis {
            if programs.len() == config.budget {
                break 'outer;
            }
            programs.push(Program {
                ff_splits: ff.clone(),
                ax3_splits: ax3.clone(),
                aux_splits: None,
                latency: None,
            });
        }
    }
    Ok(programs)
}

/// Score all candidates and return the fastest program, ties broken by the
/// lexicographically smallest `(ff_splits, ax3_splits)`. The returned program
/// carries its latency.
pub fn tune_task(
    task: &Task,
    profile: &DeviceProfile,
    config: &TunerConfig,
) -> Result<Program, TuneError> {
    let candidates = enumerate_schedules(task, profile, config)?;
    let mut best: Option<(num::BigRational, Program)> = None;
    for mut candidate in candidates {
        let exact = estimate_latency_exact(&candidate, task, profile)?;
        // strict comparison keeps the first (lexicographically smallest) winner
        if best.as_ref().is_none_or(|(b, _)| exact < *b) {
            candidate.latency = Some(cost::ratio_to_f64(&exact));
            best = Some((exact, candidate));
        }
    }
    Ok(best.expect("enumeration yields at least one candidate").1)
}

/// Whole-model latency surrogate: the sum over tasks of latency times the
/// number of subgraphs compiled from that task.
pub fn model_latency(table: &TaskTable) -> Result<f64, TaskError> {
    let mut total = 0.0;
    for task in &table.tasks {
        let latency = task.latency().ok_or(TaskError::Untuned(task.id))?;
        total += latency * task.subgraph_ids.len() as f64;
    }
    Ok(total)
}
