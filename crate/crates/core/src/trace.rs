//! Convergence traces and the shared result type of every solver.

use crate::error::Result;
use crate::model::{CostModel, ModelState};
use crate::objective::{ground_truth_error, quantization_error, Dataset, GroundTruth};

/// Default number of points used to evaluate the quantization error at checkpoints.
pub const DEFAULT_EVAL_POINTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    /// Samples processed by all workers together.
    pub samples: u64,
    /// Virtual (or wall-clock) seconds since the start of the run.
    pub time: f64,
    pub quant_error: f64,
    /// NaN when no ground truth is available.
    pub gt_error: f64,
    pub msgs_sent: u64,
    pub msgs_accepted: u64,
    pub b_current: usize,
}

/// One observation of a node's egress queue, taken at a controller tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueSample {
    pub time: f64,
    pub node: usize,
    pub occupancy: usize,
    pub b: usize,
}

/// Result of the Parzen-window audit of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub accepted_checked: u64,
    pub rejected_checked: u64,
    /// Accepted messages that did not satisfy the acceptance inequality.
    pub accept_violations: u64,
    /// Rejected messages whose step differed from the no-message step.
    pub reject_violations: u64,
}

impl AuditReport {
    pub fn violations(&self) -> u64 {
        self.accept_violations + self.reject_violations
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub messages_sent: u64,
    pub messages_refused: u64,
    pub messages_received: u64,
    pub messages_accepted: u64,
    pub overwrites: u64,
    pub queue_samples: Vec<QueueSample>,
    pub audit: Option<AuditReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub final_state: ModelState,
    pub trace: Vec<TracePoint>,
    /// Final state of every worker (a single entry for sequential solvers).
    pub worker_states: Vec<ModelState>,
    pub stats: RunStats,
}

impl SolverResult {
    pub fn final_point(&self) -> &TracePoint {
        self.trace.last().expect("trace always holds the initial checkpoint")
    }

    /// Time of the first checkpoint whose ground-truth error is below `target`.
    pub fn time_to_target(&self, target: f64) -> Option<f64> {
        self.trace.iter().find(|p| p.gt_error < target).map(|p| p.time)
    }
}

/// Measures states at checkpoints.
#[derive(Debug, Clone)]
pub struct Probe {
    eval: Dataset,
    truth: Option<GroundTruth>,
}

impl Probe {
    /// Evaluates on the first `eval_points` points of `data`.
    pub fn new(data: &Dataset, truth: Option<GroundTruth>, eval_points: usize) -> Self {
        Self {
            eval: data.head(eval_points),
            truth,
        }
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn measure(&self, w: &ModelState) -> Result<(f64, f64)> {
        let q = quantization_error(&self.eval, w)?;
        let g = match &self.truth {
            Some(t) => ground_truth_error(w, t)?,
            None => f64::NAN,
        };
        Ok((q, g))
    }
}

/// Per-run settings shared by all solvers.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub probe: Probe,
    pub cost: CostModel,
    /// Optional per-worker sample budget; a worker stops at the first step
    /// boundary where it has processed at least this many samples.
    pub sample_budget: Option<u64>,
}

impl RunContext {
    pub fn new(data: &Dataset, truth: Option<GroundTruth>) -> Self {
        Self {
            probe: Probe::new(data, truth, DEFAULT_EVAL_POINTS),
            cost: CostModel::default(),
            sample_budget: None,
        }
    }

    pub fn with_budget(mut self, samples: Option<u64>) -> Self {
        self.sample_budget = samples;
        self
    }

    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    pub(crate) fn checkpoints(&self, iterations: usize) -> Checkpoints {
        match self.sample_budget {
            Some(s) => Checkpoints::Samples {
                every: (s / 100).max(1),
                next: (s / 100).max(1),
            },
            None => {
                let every = (iterations / 100).max(1) as u64;
                Checkpoints::Steps { every, next: every }
            }
        }
    }

    pub(crate) fn keep_going(&self, step: usize, iterations: usize, samples: u64) -> bool {
        step < iterations && self.sample_budget.is_none_or(|s| samples < s)
    }
}

/// Decides which step boundaries of the observed worker produce a trace row.
#[derive(Debug, Clone)]
pub(crate) enum Checkpoints {
    Steps { every: u64, next: u64 },
    Samples { every: u64, next: u64 },
}

impl Checkpoints {
    /// Whether the boundary after `steps` steps / `samples` local samples is a checkpoint.
    pub(crate) fn hit(&mut self, steps: u64, samples: u64) -> bool {
        let (every, next, at) = match self {
            Checkpoints::Steps { every, next } => (*every, next, steps),
            Checkpoints::Samples { every, next } => (*every, next, samples),
        };
        if at >= *next {
            *next = (at / every + 1) * every;
            true
        } else {
            false
        }
    }
}
