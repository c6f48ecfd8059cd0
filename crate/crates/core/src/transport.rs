//! Emulated one-sided communication.
//!
//! A sender posts a state into its node's egress queue and returns at once;
//! the queue drains at the node's bandwidth and each message is written into
//! the recipient's single receive slot one latency after it leaves the wire.
//! A newer arrival overwrites an unread one. Recipients poll their slot when
//! they are ready and never wait.
//!
//! Timing of a message enqueued at `e` on a node whose link frees up at `f`:
//!
//! ```text
//! start   = max(e, f)
//! finish  = start + bytes / bandwidth      (link busy until finish)
//! deliver = finish + latency
//! ```
//!
//! A message counts against the queue until it is delivered.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::{ModelState, UpdateMessage, WorkerId};

/// How a run advances time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Deterministic discrete-event simulation on a virtual clock.
    #[default]
    Virtual,
    /// One OS thread per worker with real time.
    WallClock,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Virtual => "virtual",
            ExecMode::WallClock => "wall-clock",
        }
    }
}

/// Default egress queue capacity (messages per node).
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    /// Egress bandwidth per node, bytes per second.
    pub bandwidth: f64,
    /// One-way latency per message, seconds.
    pub latency: f64,
    /// Maximum messages pending per node.
    pub queue_capacity: usize,
    pub mode: ExecMode,
    /// Workers sharing one node (and one egress queue).
    pub workers_per_node: usize,
    /// Deliver half-overwritten states when a message lands on an unread one.
    pub torn_writes: bool,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self::infiniband()
    }
}

impl NetworkModel {
    pub fn infiniband() -> Self {
        Self {
            bandwidth: 6.8e9,
            latency: 1e-6,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            mode: ExecMode::Virtual,
            workers_per_node: 1,
            torn_writes: false,
        }
    }

    pub fn ethernet() -> Self {
        Self {
            bandwidth: 1.25e8,
            latency: 50e-6,
            ..Self::infiniband()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "infiniband" | "ib" => Ok(Self::infiniband()),
            "ethernet" | "gige" => Ok(Self::ethernet()),
            other => Err(Error::invalid(
                "network",
                format!("unknown preset `{other}` (expected infiniband or ethernet)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth", "must be > 0"));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(Error::invalid("latency", "must be a finite value >= 0"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::invalid("queue_capacity", "must be >= 1"));
        }
        if self.workers_per_node == 0 {
            return Err(Error::invalid("workers_per_node", "must be >= 1"));
        }
        Ok(())
    }

    pub fn node_of(&self, worker: WorkerId) -> usize {
        worker / self.workers_per_node
    }

    pub fn nodes_for(&self, workers: usize) -> usize {
        workers.div_ceil(self.workers_per_node)
    }

    /// Seconds a message of `bytes` occupies the link.
    pub fn serialization_delay(&self, bytes: usize) -> f64 {
        bytes as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Accepted,
    /// The egress queue was full; the message was dropped.
    Refused,
}

/// Anything that can report a node's egress queue occupancy.
pub trait QueueMonitor {
    /// Occupancy of the egress queue of the node hosting `worker`.
    fn queue_size(&self, worker: WorkerId) -> usize;
}

/// A worker's single receive slot.
#[derive(Debug, Clone, Default)]
pub struct RemoteBuffer {
    pub slot: Option<UpdateMessage>,
    pub overwrite_count: u64,
}

impl RemoteBuffer {
    fn write(&mut self, msg: UpdateMessage, torn: bool) {
        let msg = match self.slot.take() {
            Some(old) => {
                self.overwrite_count += 1;
                if torn {
                    tear(&old.state, msg)
                } else {
                    msg
                }
            }
            None => msg,
        };
        self.slot = Some(msg);
    }
}

/// First half of the components from `old`, second half from `newer`.
pub(crate) fn tear(old: &ModelState, mut newer: UpdateMessage) -> UpdateMessage {
    if old.shape() == newer.state.shape() {
        let half = old.as_slice().len() / 2;
        newer.state.as_mut_slice()[..half].copy_from_slice(&old.as_slice()[..half]);
    }
    newer
}

#[derive(Debug, Clone)]
pub struct PendingMessage {
    pub msg: UpdateMessage,
    pub dst: WorkerId,
    pub enqueued_at: f64,
    pub deliver_at: f64,
    pub bytes: usize,
    seq: u64,
}

#[derive(Debug, Clone, Default)]
pub struct EgressQueue {
    pub pending: VecDeque<PendingMessage>,
    link_free_at: f64,
}

impl EgressQueue {
    pub fn size(&self) -> usize {
        self.pending.len()
    }
}

/// Per-node counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    /// Every `post_send` call, accepted or not.
    pub posted: u64,
    pub delivered: u64,
    pub refused: u64,
    pub bytes_delivered: u64,
}

/// Virtual-time transport driven by an external scheduler.
#[derive(Debug, Clone)]
pub struct SimTransport {
    model: NetworkModel,
    workers: usize,
    now: f64,
    seq: u64,
    queues: Vec<EgressQueue>,
    buffers: Vec<RemoteBuffer>,
    stats: Vec<NodeStats>,
}

impl SimTransport {
    pub fn new(model: NetworkModel, workers: usize) -> Result<Self> {
        model.validate()?;
        if workers == 0 {
            return Err(Error::invalid("workers", "must be >= 1"));
        }
        let nodes = model.nodes_for(workers);
        Ok(Self {
            model,
            workers,
            now: 0.0,
            seq: 0,
            queues: vec![EgressQueue::default(); nodes],
            buffers: vec![RemoteBuffer::default(); workers],
            stats: vec![NodeStats::default(); nodes],
        })
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn nodes(&self) -> usize {
        self.queues.len()
    }

    /// Non-blocking post from `src` to `dst` at virtual time `now`.
    pub fn post_send(&mut self, src: WorkerId, dst: WorkerId, msg: UpdateMessage, now: f64) -> Result<SendOutcome> {
        if src == dst {
            return Err(Error::SelfSend(src));
        }
        if dst >= self.workers || src >= self.workers {
            return Err(Error::invalid("worker", format!("{src} -> {dst} with {} workers", self.workers)));
        }
        if now < self.now {
            return Err(Error::TimeRegression {
                now,
                previous: self.now,
            });
        }
        let node = self.model.node_of(src);
        self.stats[node].posted += 1;
        let queue = &mut self.queues[node];
        if queue.pending.len() >= self.model.queue_capacity {
            self.stats[node].refused += 1;
            return Ok(SendOutcome::Refused);
        }
        let bytes = msg.size_bytes();
        let start = now.max(queue.link_free_at);
        let finish = start + self.model.serialization_delay(bytes);
        queue.link_free_at = finish;
        queue.pending.push_back(PendingMessage {
            msg,
            dst,
            enqueued_at: now,
            deliver_at: finish + self.model.latency,
            bytes,
            seq: self.seq,
        });
        self.seq += 1;
        Ok(SendOutcome::Accepted)
    }

    /// Takes the message in `worker`'s slot, if any.
    pub fn poll_receive(&mut self, worker: WorkerId) -> Option<UpdateMessage> {
        self.buffers[worker].slot.take()
    }

    pub fn peek_slot(&self, worker: WorkerId) -> Option<&UpdateMessage> {
        self.buffers[worker].slot.as_ref()
    }

    pub fn buffer(&self, worker: WorkerId) -> &RemoteBuffer {
        &self.buffers[worker]
    }

    pub fn queue(&self, node: usize) -> &EgressQueue {
        &self.queues[node]
    }

    pub fn node_stats(&self, node: usize) -> NodeStats {
        self.stats[node]
    }

    pub fn total_overwrites(&self) -> u64 {
        self.buffers.iter().map(|b| b.overwrite_count).sum()
    }

    /// Delivers every message due at or before `now`, in delivery-time order.
    pub fn advance(&mut self, now: f64) -> Result<usize> {
        if now < self.now {
            return Err(Error::TimeRegression {
                now,
                previous: self.now,
            });
        }
        self.now = now;
        let mut due: Vec<(usize, PendingMessage)> = Vec::new();
        for (node, q) in self.queues.iter_mut().enumerate() {
            while q.pending.front().is_some_and(|p| p.deliver_at <= now) {
                due.push((node, q.pending.pop_front().expect("front checked")));
            }
        }
        if due.len() > 1 {
            due.sort_by(|a, b| a.1.deliver_at.total_cmp(&b.1.deliver_at).then(a.1.seq.cmp(&b.1.seq)));
        }
        let count = due.len();
        for (node, p) in due {
            let s = &mut self.stats[node];
            s.delivered += 1;
            s.bytes_delivered += p.bytes as u64;
            self.buffers[p.dst].write(p.msg, self.model.torn_writes);
        }
        Ok(count)
    }

    /// Earliest pending delivery time, if any message is in flight.
    pub fn next_delivery(&self) -> Option<f64> {
        self.queues
            .iter()
            .filter_map(|q| q.pending.front().map(|p| p.deliver_at))
            .min_by(f64::total_cmp)
    }
}

impl QueueMonitor for SimTransport {
    fn queue_size(&self, worker: WorkerId) -> usize {
        self.queues[self.model.node_of(worker)].pending.len()
    }
}

/// Free-function form of [`QueueMonitor::queue_size`].
pub fn queue_size<T: QueueMonitor>(transport: &T, worker: WorkerId) -> usize {
    transport.queue_size(worker)
}
