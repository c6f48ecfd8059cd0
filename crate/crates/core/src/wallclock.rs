//! Real-time execution: one thread per worker plus a delivery thread that
//! plays the role of the network.
//!
//! Receive slots are single atomic pointers, so a write never blocks the
//! owner and the owner never blocks the writer. Senders reserve a place in
//! their node's egress counter and hand the message to the delivery thread,
//! which releases it into the destination slot at its delivery time.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender};

use crate::adaptive::{adapt, ControllerState, DEFAULT_INTERVAL};
use crate::asgd::{make_workers, AsgdConfig};
use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelState, UpdateMessage, WorkerId};
use crate::objective::Dataset;
use crate::trace::{AuditReport, QueueSample, RunContext, RunStats, SolverResult, TracePoint};
use crate::transport::{tear, NetworkModel, NodeStats, QueueMonitor, SendOutcome};

/// Single-message mailbox written by one delivery thread and drained by its owner.
#[derive(Debug, Default)]
pub struct SharedSlot {
    ptr: AtomicPtr<UpdateMessage>,
    overwrites: AtomicU64,
}

impl SharedSlot {
    /// Stores `msg`, replacing an unread message. With `torn` set the stored
    /// state keeps the first half of the replaced one.
    pub fn write(&self, msg: UpdateMessage, torn: bool) {
        let old = self.take_raw();
        let msg = match old {
            Some(old) => {
                self.overwrites.fetch_add(1, Ordering::Relaxed);
                if torn {
                    tear(&old.state, msg)
                } else {
                    msg
                }
            }
            None => msg,
        };
        let prev = self.ptr.swap(Box::into_raw(Box::new(msg)), Ordering::AcqRel);
        if !prev.is_null() {
            // Only reachable with more than one writer; keep the newest.
            self.overwrites.fetch_add(1, Ordering::Relaxed);
            // SAFETY: the pointer came from Box::into_raw and was swapped out exactly once.
            drop(unsafe { Box::from_raw(prev) });
        }
    }

    pub fn take(&self) -> Option<UpdateMessage> {
        self.take_raw().map(|b| *b)
    }

    fn take_raw(&self) -> Option<Box<UpdateMessage>> {
        let p = self.ptr.swap(ptr::null_mut(), Ordering::AcqRel);
        // SAFETY: non-null pointers in the slot always come from Box::into_raw
        // and swapping them out transfers ownership to us.
        (!p.is_null()).then(|| unsafe { Box::from_raw(p) })
    }

    pub fn overwrite_count(&self) -> u64 {
        self.overwrites.load(Ordering::Relaxed)
    }
}

impl Drop for SharedSlot {
    fn drop(&mut self) {
        self.take_raw();
    }
}

struct InFlight {
    deliver_at: f64,
    seq: u64,
    node: usize,
    dst: WorkerId,
    bytes: usize,
    msg: UpdateMessage,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for InFlight {}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for InFlight {
    // Reversed: BinaryHeap is a max-heap and we want the earliest delivery.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other
            .deliver_at
            .total_cmp(&self.deliver_at)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct NodeCounters {
    occupancy: AtomicUsize,
    posted: AtomicU64,
    delivered: AtomicU64,
    refused: AtomicU64,
    bytes_delivered: AtomicU64,
}

/// Thread-safe transport on the real clock.
pub struct WallClockTransport {
    model: NetworkModel,
    start: Instant,
    slots: Vec<SharedSlot>,
    nodes: Vec<NodeCounters>,
    link_free_at: Vec<Mutex<f64>>,
    seq: AtomicU64,
    outbox: Sender<InFlight>,
}

impl WallClockTransport {
    /// Creates the transport and the receiving end for [`Self::deliver_loop`].
    fn new(model: NetworkModel, workers: usize) -> Result<(Self, Receiver<InFlight>)> {
        model.validate()?;
        let nodes = model.nodes_for(workers);
        let (tx, rx) = channel::unbounded();
        Ok((
            Self {
                start: Instant::now(),
                slots: (0..workers).map(|_| SharedSlot::default()).collect(),
                nodes: (0..nodes).map(|_| NodeCounters::default()).collect(),
                link_free_at: (0..nodes).map(|_| Mutex::new(0.0)).collect(),
                seq: AtomicU64::new(0),
                outbox: tx,
                model,
            },
            rx,
        ))
    }

    /// Seconds since the transport was created.
    pub fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn post_send(&self, src: WorkerId, dst: WorkerId, msg: UpdateMessage) -> Result<SendOutcome> {
        if src == dst {
            return Err(Error::SelfSend(src));
        }
        if src >= self.slots.len() || dst >= self.slots.len() {
            return Err(Error::invalid("worker", format!("{src} -> {dst} with {} workers", self.slots.len())));
        }
        let node = self.model.node_of(src);
        let counters = &self.nodes[node];
        counters.posted.fetch_add(1, Ordering::Relaxed);
        let cap = self.model.queue_capacity;
        let reserved = counters
            .occupancy
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |q| (q < cap).then_some(q + 1));
        if reserved.is_err() {
            counters.refused.fetch_add(1, Ordering::Relaxed);
            return Ok(SendOutcome::Refused);
        }
        let bytes = msg.size_bytes();
        let now = self.now();
        let finish = {
            let mut free = self.link_free_at[node].lock().unwrap_or_else(|e| e.into_inner());
            let finish = now.max(*free) + self.model.serialization_delay(bytes);
            *free = finish;
            finish
        };
        let item = InFlight {
            deliver_at: finish + self.model.latency,
            seq: self.seq.fetch_add(1, Ordering::Relaxed),
            node,
            dst,
            bytes,
            msg,
        };
        if self.outbox.send(item).is_err() {
            // Delivery thread gone: the run is shutting down.
            counters.occupancy.fetch_sub(1, Ordering::AcqRel);
            counters.refused.fetch_add(1, Ordering::Relaxed);
            return Ok(SendOutcome::Refused);
        }
        Ok(SendOutcome::Accepted)
    }

    pub fn poll_receive(&self, worker: WorkerId) -> Option<UpdateMessage> {
        self.slots[worker].take()
    }

    pub fn node_stats(&self, node: usize) -> NodeStats {
        let c = &self.nodes[node];
        NodeStats {
            posted: c.posted.load(Ordering::Relaxed),
            delivered: c.delivered.load(Ordering::Relaxed),
            refused: c.refused.load(Ordering::Relaxed),
            bytes_delivered: c.bytes_delivered.load(Ordering::Relaxed),
        }
    }

    pub fn total_overwrites(&self) -> u64 {
        self.slots.iter().map(SharedSlot::overwrite_count).sum()
    }

    fn deliver(&self, item: InFlight) {
        let c = &self.nodes[item.node];
        self.slots[item.dst].write(item.msg, self.model.torn_writes);
        c.delivered.fetch_add(1, Ordering::Relaxed);
        c.bytes_delivered.fetch_add(item.bytes as u64, Ordering::Relaxed);
        c.occupancy.fetch_sub(1, Ordering::AcqRel);
    }

    /// Runs until `stop` is set; messages still in flight at that point stay pending.
    fn deliver_loop(&self, rx: Receiver<InFlight>, stop: &AtomicBool) {
        let mut heap = BinaryHeap::new();
        while !stop.load(Ordering::Acquire) {
            let now = self.now();
            while heap.peek().is_some_and(|m: &InFlight| m.deliver_at <= now) {
                self.deliver(heap.pop().expect("peeked"));
            }
            let wait = heap
                .peek()
                .map_or(Duration::from_millis(2), |m| Duration::from_secs_f64((m.deliver_at - now).max(0.0)))
                .min(Duration::from_millis(2));
            match rx.recv_timeout(wait) {
                Ok(item) => heap.push(item),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            while let Ok(item) = rx.try_recv() {
                heap.push(item);
            }
        }
    }
}

impl QueueMonitor for WallClockTransport {
    fn queue_size(&self, worker: WorkerId) -> usize {
        self.nodes[self.model.node_of(worker)].occupancy.load(Ordering::Acquire)
    }
}

#[derive(Default)]
struct Shared {
    samples: AtomicU64,
    sent: AtomicU64,
    accepted: AtomicU64,
}

struct WorkerOutput {
    state: ModelState,
    counters: crate::asgd::WorkerCounters,
    trace: Vec<TracePoint>,
    queue_samples: Vec<QueueSample>,
    audit: Option<AuditReport>,
}

pub(crate) fn run(
    data: &Dataset,
    hp: &Hyperparams,
    w0: &ModelState,
    net: &NetworkModel,
    controller: Option<&ControllerState>,
    cfg: &AsgdConfig,
    ctx: &RunContext,
) -> Result<SolverResult> {
    let (transport, rx) = WallClockTransport::new(net.clone(), hp.workers)?;
    let workers = make_workers(data, hp, w0)?;
    let nodes = net.nodes_for(hp.workers);
    let node_b: Vec<AtomicUsize> = (0..nodes).map(|_| AtomicUsize::new(controller.map_or(hp.b, |c| c.b))).collect();
    let tick_every = controller.map_or(Some(DEFAULT_INTERVAL), |c| c.interval);
    let shared = Shared::default();
    let stop = AtomicBool::new(false);

    let outputs: Vec<Result<WorkerOutput>> = thread::scope(|s| {
        let delivery = s.spawn(|| transport.deliver_loop(rx, &stop));
        let handles: Vec<_> = workers
            .into_iter()
            .map(|mut ws| {
                let (transport, node_b, shared) = (&transport, &node_b, &shared);
                let mut cs = controller.cloned();
                s.spawn(move || -> Result<WorkerOutput> {
                    let i = ws.id;
                    let node = net.node_of(i);
                    let lead = i == node * net.workers_per_node;
                    let mut audit = cfg.audit.then(AuditReport::default);
                    let mut trace = Vec::new();
                    let mut queue_samples = Vec::new();
                    let mut checkpoints = ctx.checkpoints(hp.iterations);
                    if i == 0 {
                        trace.push(point(ctx, &ws.w, 0.0, shared, node_b[0].load(Ordering::Relaxed))?);
                    }
                    while ctx.keep_going(ws.t as usize, hp.iterations, ws.samples) {
                        let b = node_b[node].load(Ordering::Relaxed);
                        let incoming = transport.poll_receive(i);
                        let out = ws.compute_step(data, b, hp.epsilon, incoming.as_ref(), audit.as_mut())?;
                        shared.samples.fetch_add(b as u64, Ordering::Relaxed);
                        if out.accepted {
                            shared.accepted.fetch_add(1, Ordering::Relaxed);
                        }
                        if ws.sends_now(hp.workers, cfg.send_every) {
                            let dst = ws.pick_peer(hp.workers);
                            let outcome = transport.post_send(i, dst, ws.message())?;
                            ws.count_send(outcome);
                            if outcome == SendOutcome::Accepted {
                                shared.sent.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        if lead && tick_every.is_some_and(|every| ws.t % every == 0) {
                            let q0 = transport.queue_size(i);
                            if let Some(c) = cs.as_mut() {
                                *c = adapt(c, q0);
                                node_b[node].store(c.b, Ordering::Relaxed);
                            }
                            queue_samples.push(QueueSample {
                                time: transport.now(),
                                node,
                                occupancy: q0,
                                b: node_b[node].load(Ordering::Relaxed),
                            });
                        }
                        if i == 0 {
                            let done = !ctx.keep_going(ws.t as usize, hp.iterations, ws.samples);
                            if checkpoints.hit(ws.t, ws.samples) || done {
                                trace.push(point(ctx, &ws.w, transport.now(), shared, node_b[0].load(Ordering::Relaxed))?);
                            }
                        }
                    }
                    Ok(WorkerOutput {
                        state: ws.w,
                        counters: ws.stats,
                        trace,
                        queue_samples,
                        audit,
                    })
                })
            })
            .collect();
        let outputs = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("worker", "thread panicked"))))
            .collect();
        stop.store(true, Ordering::Release);
        delivery.join().expect("delivery thread panicked");
        outputs
    });

    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut stats = RunStats {
        overwrites: transport.total_overwrites(),
        audit: cfg.audit.then(AuditReport::default),
        ..RunStats::default()
    };
    let mut trace = Vec::new();
    let mut worker_states = Vec::with_capacity(outputs.len());
    for o in outputs {
        o.state.check_finite()?;
        stats.messages_sent += o.counters.messages_sent;
        stats.messages_refused += o.counters.messages_refused;
        stats.messages_received += o.counters.messages_received;
        stats.messages_accepted += o.counters.messages_accepted;
        stats.queue_samples.extend(o.queue_samples);
        if let (Some(total), Some(a)) = (stats.audit.as_mut(), o.audit) {
            total.accepted_checked += a.accepted_checked;
            total.rejected_checked += a.rejected_checked;
            total.accept_violations += a.accept_violations;
            total.reject_violations += a.reject_violations;
        }
        if trace.is_empty() {
            trace = o.trace;
        }
        worker_states.push(o.state);
    }
    stats.queue_samples.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(SolverResult {
        final_state: worker_states[0].clone(),
        worker_states,
        trace,
        stats,
    })
}

fn point(ctx: &RunContext, w: &ModelState, time: f64, shared: &Shared, b: usize) -> Result<TracePoint> {
    let (quant_error, gt_error) = ctx.probe.measure(w)?;
    Ok(TracePoint {
        samples: shared.samples.load(Ordering::Relaxed),
        time,
        quant_error,
        gt_error,
        msgs_sent: shared.sent.load(Ordering::Relaxed),
        msgs_accepted: shared.accepted.load(Ordering::Relaxed),
        b_current: b,
    })
}
