//! Mini-batch size controller driven by egress queue occupancy.
//!
//! Each call compares the target occupancy with the queue history and moves
//! `b` against the difference:
//!
//! ```text
//! dq = (q_opt - q0) - (q2 - q0)
//! b  = b - gamma * dq
//! q2 = q1; q1 = q0
//! ```
//!
//! The two `q0` terms cancel, so `dq == q_opt - q2`: the current reading only
//! enters the update through the history two calls later. The rule is kept
//! exactly in this form.

use crate::error::{Error, Result};
use crate::model::WorkerId;
use crate::transport::QueueMonitor;

pub const DEFAULT_B_MIN: usize = 8;
pub const DEFAULT_B_MAX: usize = 100_000;
pub const DEFAULT_INTERVAL: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub q_opt: f64,
    pub q1: f64,
    pub q2: f64,
    pub gamma: f64,
    pub b: usize,
    pub b_min: usize,
    pub b_max: usize,
    /// Worker steps between controller invocations; `None` disables the controller.
    pub interval: Option<u64>,
}

impl ControllerState {
    /// Defaults: `q_opt` half the queue capacity, `gamma = 0.1 * b / q_opt`,
    /// an invocation every 10 steps, `b` clamped to `[8, 100000]`. The
    /// history starts at `q_opt`, so the first two calls leave `b` alone.
    pub fn with_defaults(b_initial: usize, queue_capacity: usize) -> Self {
        let q_opt = (queue_capacity as f64 / 2.0).max(1.0);
        Self {
            q_opt,
            q1: q_opt,
            q2: q_opt,
            gamma: 0.1 * b_initial as f64 / q_opt,
            b: b_initial.clamp(DEFAULT_B_MIN, DEFAULT_B_MAX),
            b_min: DEFAULT_B_MIN,
            b_max: DEFAULT_B_MAX,
            interval: Some(DEFAULT_INTERVAL),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", "must be > 0"));
        }
        if !(self.q_opt >= 0.0 && self.q_opt.is_finite()) {
            return Err(Error::invalid("q_opt", "must be >= 0"));
        }
        if self.b_min == 0 || self.b_min > self.b_max {
            return Err(Error::invalid("b_min", format!("need 1 <= b_min <= b_max, got {}..{}", self.b_min, self.b_max)));
        }
        if !(self.b_min..=self.b_max).contains(&self.b) {
            return Err(Error::invalid("b", format!("{} outside [{}, {}]", self.b, self.b_min, self.b_max)));
        }
        if self.interval == Some(0) {
            return Err(Error::invalid("controller_interval", "must be >= 1"));
        }
        Ok(())
    }

    /// Queue "gradient" for the current reading.
    pub fn delta_q(&self, q0: f64) -> f64 {
        (self.q_opt - q0) - (self.q2 - q0)
    }
}

/// One controller update for the current queue reading `q0`.
pub fn adapt(cs: &ControllerState, q0: usize) -> ControllerState {
    let q0 = q0 as f64;
    let dq = cs.delta_q(q0);
    let raw = (cs.b as f64 - dq * cs.gamma).round();
    let b = raw.clamp(cs.b_min as f64, cs.b_max as f64) as usize;
    ControllerState {
        b,
        q2: cs.q1,
        q1: q0,
        ..cs.clone()
    }
}

/// Reads the queue of `worker`'s node and applies [`adapt`].
pub fn controller_tick<T: QueueMonitor + ?Sized>(cs: &ControllerState, transport: &T, worker: WorkerId) -> ControllerState {
    adapt(cs, transport.queue_size(worker))
}
