//! Accuracy oracles.
//!
//! The prune loop needs a short-term accuracy signal per candidate model and
//! a final score for the accepted one. Two implementations are provided:
//!
//! * [`SyntheticOracle`] — deterministic stand-in for short-term training:
//!   accuracy drops from a baseline in proportion to the pruned fraction of
//!   each layer's l1 weight mass.
//! * [`ExternalOracle`] — spawns a configured command, writes a JSON request
//!   (`{"model": <model spec>, "mode": "short"|"final", "epochs": N}`) to its
//!   stdin, and reads `{"accuracy": <fraction>}` from its stdout. A nonzero
//!   exit status, a timeout, or an out-of-range fraction is an error. This is
//!   the extension point for real training.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ModelGraph, NodeId};

/// Which training regime the evaluation stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Short,
    Final,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("failed to spawn oracle command `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("oracle i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("oracle timed out after {0:?}")]
    Timeout(Duration),
    #[error("oracle exited with status {status}: {stderr}")]
    Failed { status: i32, stderr: String },
    #[error("oracle response is not valid JSON: {0}")]
    BadResponse(#[from] serde_json::Error),
    #[error("oracle accuracy {0} is outside [0, 1]")]
    OutOfRange(f64),
}

/// Anything that can score a model's accuracy.
pub trait AccuracyOracle {
    fn evaluate(&self, model: &ModelGraph, mode: OracleMode) -> Result<f64, OracleError>;
}

/// Penalty share of one conv layer: pruned l1 mass over original l1 mass.
fn conv_masses(model: &ModelGraph) -> BTreeMap<NodeId, f64> {
    model
        .nodes()
        .iter()
        .filter_map(|n| n.as_conv().map(|c| (n.id.clone(), c.l1_mass())))
        .collect()
}

/// Deterministic accuracy stand-in: `baseline - kappa * sum over layers of
/// (pruned l1 mass / original l1 mass)`, clamped to `[0, 1]`. The reference
/// masses come from the unpruned model.
pub fn synthetic_accuracy(
    reference: &ModelGraph,
    model: &ModelGraph,
    baseline: f64,
    kappa: f64,
) -> f64 {
    let current = conv_masses(model);
    let mut penalty = 0.0;
    for (id, original) in conv_masses(reference) {
        if original <= 0.0 {
            continue;
        }
        let remaining = current.get(&id).copied().unwrap_or(0.0);
        penalty += (original - remaining).max(0.0) / original;
    }
    (baseline - kappa * penalty).clamp(0.0, 1.0)
}

/// See [`synthetic_accuracy`]. The training mode is ignored: short-term and
/// final evaluations score identically.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    baseline: f64,
    kappa: f64,
    reference: ModelGraph,
}

impl SyntheticOracle {
    pub fn new(reference: &ModelGraph, baseline: f64, kappa: f64) -> Self {
        SyntheticOracle { baseline, kappa, reference: reference.clone() }
    }
}

impl AccuracyOracle for SyntheticOracle {
    fn evaluate(&self, model: &ModelGraph, _mode: OracleMode) -> Result<f64, OracleError> {
        Ok(synthetic_accuracy(&self.reference, model, self.baseline, self.kappa))
    }
}

#[derive(Serialize)]
struct OracleRequest {
    model: crate::graph::ModelSpec,
    mode: OracleMode,
    epochs: u64,
}

#[derive(Deserialize)]
struct OracleResponse {
    accuracy: f64,
}

/// Subprocess oracle speaking JSON over stdin/stdout.
#[derive(Debug, Clone)]
pub struct ExternalOracle {
    command: Vec<String>,
    timeout: Duration,
    short_epochs: u64,
    final_epochs: u64,
}

impl ExternalOracle {
    pub fn new(
        command: Vec<String>,
        timeout: Duration,
        short_epochs: u64,
        final_epochs: u64,
    ) -> Self {
        ExternalOracle { command, timeout, short_epochs, final_epochs }
    }
}

impl AccuracyOracle for ExternalOracle {
    fn evaluate(&self, model: &ModelGraph, mode: OracleMode) -> Result<f64, OracleError> {
        let (program, args) =
            self.command.split_first().expect("oracle command must not be empty");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| OracleError::Spawn { command: self.command.join(" "), source })?;

        let request = OracleRequest {
            model: model.to_spec(true),
            mode,
            epochs: match mode {
                OracleMode::Short => self.short_epochs,
                OracleMode::Final => self.final_epochs,
            },
        };
        let payload = serde_json::to_vec(&request)?;
        // write on a thread: a child that never drains stdin must still hit
        // the timeout below instead of wedging us in write_all
        let mut stdin = child.stdin.take().expect("stdin piped");
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(&payload);
        });

        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait()? {
                Some(_) => break,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    let _ = writer.join();
                    return Err(OracleError::Timeout(self.timeout));
                }
                None => std::thread::sleep(Duration::from_millis(10)),
            }
        }
        let _ = writer.join();
        let output = child.wait_with_output()?;
        if !output.status.success() {
            return Err(OracleError::Failed {
                status: output.status.code().unwrap_or(-1),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        let response: OracleResponse = serde_json::from_slice(&output.stdout)?;
        if !(0.0..=1.0).contains(&response.accuracy) {
            return Err(OracleError::OutOfRange(response.accuracy));
        }
        Ok(response.accuracy)
    }
}
