//! Asynchronous SGD.
//!
//! Every worker runs mini-batch SGD on its own partition. After each
//! mini-batch it posts its state to one random peer without waiting, and
//! before each mini-batch it takes whatever state sits in its receive slot.
//! An external state `w_j` is only merged if the local step moves towards it:
//!
//! ```text
//! accept  <=>  |(w_i - eps*g) - w_j|^2 < |w_i - w_j|^2
//! g'       =  accept ? 0.5*(w_i - w_j) + g : g
//! w_i     <-  w_i - eps*g'
//! ```
//!
//! where `g` is the mini-batch gradient. The run returns worker 0's state.
//!
//! In virtual-time mode the workers are interleaved by a discrete-event
//! scheduler: a step that starts at `t` reads the slot at `t`, takes
//! `d` virtual seconds according to the [`CostModel`], and posts at `t + d`.
//! Ties are broken by worker id, so equal-cost workers advance round-robin.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::adaptive::{adapt, ControllerState, DEFAULT_INTERVAL};
use crate::error::{Error, Result};
use crate::model::{CostModel, Hyperparams, ModelState, UpdateMessage, UpdateVector, WorkerId};
use crate::objective::Dataset;
use crate::sampling::{partition, worker_rng, LocalSampler};
use crate::solvers::{batch_gradient, descend};
use crate::trace::{AuditReport, QueueSample, RunContext, RunStats, SolverResult, TracePoint};
use crate::transport::{ExecMode, NetworkModel, QueueMonitor, SendOutcome, SimTransport};
use crate::wallclock;

/// Engine options that are not hyperparameters of the method itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AsgdConfig {
    /// Post after every `send_every`-th mini-batch; `None` never communicates.
    pub send_every: Option<u64>,
    /// Re-check the acceptance rule of every received message.
    pub audit: bool,
}

impl Default for AsgdConfig {
    fn default() -> Self {
        Self {
            send_every: Some(1),
            audit: false,
        }
    }
}

/// Whether the local step moves `w_i` strictly closer to `w_j`.
pub fn parzen_accept(w_i: &ModelState, w_j: &ModelState, step: &UpdateVector, epsilon: f64) -> Result<bool> {
    w_i.ensure_same_shape(w_j)?;
    w_i.ensure_same_shape(step)?;
    Ok(accepts(w_i.as_slice(), w_j.as_slice(), step.as_slice(), epsilon))
}

#[inline]
fn accepts(w: &[f64], ext: &[f64], g: &[f64], eps: f64) -> bool {
    let mut after = 0.0;
    let mut before = 0.0;
    for ((wi, ej), gi) in w.iter().zip(ext).zip(g) {
        let d0 = wi - ej;
        let d1 = (wi - eps * gi) - ej;
        before += d0 * d0;
        after += d1 * d1;
    }
    after < before
}

/// The merged step: `0.5*(w_i - w_j) + delta` when `w_j` is present and
/// accepted, `delta` otherwise.
pub fn merge_update(
    w_i: &ModelState,
    w_j: Option<&ModelState>,
    delta: &UpdateVector,
    epsilon: f64,
) -> Result<UpdateVector> {
    w_i.ensure_same_shape(delta)?;
    let Some(w_j) = w_j else {
        return Ok(delta.clone());
    };
    if !parzen_accept(w_i, w_j, delta, epsilon)? {
        return Ok(delta.clone());
    }
    let mut out = delta.clone();
    for ((o, wi), wj) in out.as_mut_slice().iter_mut().zip(w_i.as_slice()).zip(w_j.as_slice()) {
        *o += 0.5 * (wi - wj);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerCounters {
    pub messages_sent: u64,
    pub messages_refused: u64,
    pub messages_received: u64,
    pub messages_accepted: u64,
}

/// What a finished mini-batch did, for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub samples: usize,
    pub received: bool,
    pub accepted: bool,
}

/// One ASGD worker.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: WorkerId,
    pub w: ModelState,
    /// Completed mini-batches.
    pub t: u64,
    pub samples: u64,
    pub stats: WorkerCounters,
    sampler: LocalSampler,
    grad: ModelState,
    batch: Vec<usize>,
    before: Option<ModelState>,
}

impl WorkerState {
    pub fn new(id: WorkerId, w0: ModelState, partition: Vec<usize>, seed: u64) -> Result<Self> {
        let (k, n) = w0.shape();
        Ok(Self {
            id,
            w: w0,
            t: 0,
            samples: 0,
            stats: WorkerCounters::default(),
            sampler: LocalSampler::new(partition, worker_rng(seed, id))?,
            grad: ModelState::zeros(k, n),
            batch: Vec::new(),
            before: None,
        })
    }

    /// Draws a mini-batch of `b`, merges `incoming` if it passes the filter
    /// and applies the step to `self.w`.
    pub fn compute_step(
        &mut self,
        data: &Dataset,
        b: usize,
        epsilon: f64,
        incoming: Option<&UpdateMessage>,
        audit: Option<&mut AuditReport>,
    ) -> Result<StepOutcome> {
        self.sampler.draw(b, &mut self.batch);
        batch_gradient(data, &self.batch, &self.w, &mut self.grad);
        let mut outcome = StepOutcome {
            samples: b,
            received: false,
            accepted: false,
        };
        match incoming {
            None => descend(&mut self.w, epsilon, &self.grad),
            Some(msg) => {
                let ext = &msg.state;
                self.w.ensure_same_shape(ext)?;
                outcome.received = true;
                self.stats.messages_received += 1;
                if let Some(report) = &audit {
                    let _ = report;
                    self.before = Some(self.w.clone());
                }
                let accept = accepts(self.w.as_slice(), ext.as_slice(), self.grad.as_slice(), epsilon);
                if accept {
                    outcome.accepted = true;
                    self.stats.messages_accepted += 1;
                    for ((wi, ej), gi) in self.w.as_mut_slice().iter_mut().zip(ext.as_slice()).zip(self.grad.as_slice()) {
                        let merged = 0.5 * (*wi - ej) + gi;
                        *wi -= epsilon * merged;
                    }
                } else {
                    descend(&mut self.w, epsilon, &self.grad);
                }
                if let (Some(report), Some(before)) = (audit, self.before.take()) {
                    audit_step(report, &before, ext, &self.grad, epsilon, &self.w, accept)?;
                }
            }
        }
        self.t += 1;
        self.samples += b as u64;
        Ok(outcome)
    }

    /// Posts the current state to a random peer if this step communicates.
    pub fn publish(
        &mut self,
        transport: &mut SimTransport,
        workers: usize,
        send_every: Option<u64>,
        now: f64,
    ) -> Result<Option<SendOutcome>> {
        if !self.sends_now(workers, send_every) {
            return Ok(None);
        }
        let dst = self.sampler.peer(self.id, workers);
        let outcome = transport.post_send(self.id, dst, self.message(), now)?;
        self.count_send(outcome);
        Ok(Some(outcome))
    }

    pub(crate) fn sends_now(&self, workers: usize, send_every: Option<u64>) -> bool {
        workers > 1 && send_every.is_some_and(|every| self.t % every == 0)
    }

    pub(crate) fn pick_peer(&mut self, workers: usize) -> WorkerId {
        self.sampler.peer(self.id, workers)
    }

    pub(crate) fn message(&self) -> UpdateMessage {
        UpdateMessage {
            state: self.w.clone(),
            sender: self.id,
            sender_iteration: self.t,
        }
    }

    pub(crate) fn count_send(&mut self, outcome: SendOutcome) {
        match outcome {
            SendOutcome::Accepted => self.stats.messages_sent += 1,
            SendOutcome::Refused => self.stats.messages_refused += 1,
        }
    }
}

/// Independent re-check of one filtered step.
fn audit_step(
    report: &mut AuditReport,
    before: &ModelState,
    ext: &ModelState,
    grad: &ModelState,
    epsilon: f64,
    after: &ModelState,
    accepted: bool,
) -> Result<()> {
    let mut local = before.clone();
    local.axpy(-epsilon, grad)?;
    if accepted {
        report.accepted_checked += 1;
        if local.distance_sq(ext)? >= before.distance_sq(ext)? {
            report.accept_violations += 1;
        }
    } else {
        report.rejected_checked += 1;
        let same = local
            .as_slice()
            .iter()
            .zip(after.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            report.reject_violations += 1;
        }
    }
    Ok(())
}

/// A full ASGD step at a single instant: poll, compute, apply, post.
pub fn worker_step(
    ws: &mut WorkerState,
    data: &Dataset,
    hp: &Hyperparams,
    transport: &mut SimTransport,
    now: f64,
) -> Result<StepOutcome> {
    transport.advance(now)?;
    let incoming = transport.poll_receive(ws.id);
    let outcome = ws.compute_step(data, hp.b, hp.epsilon, incoming.as_ref(), None)?;
    ws.publish(transport, hp.workers, Some(1), now)?;
    Ok(outcome)
}

/// Virtual seconds one step takes.
pub(crate) fn step_cost(cost: &CostModel, k: usize, n: usize, outcome: &StepOutcome, posts: bool) -> f64 {
    // Apply the step, plus two distance passes and the merge for a received
    // state, plus one copy into the send buffer.
    let passes = 1 + if outcome.received { 3 } else { 0 } + usize::from(posts);
    cost.gradient(outcome.samples, k, n) + cost.state_passes(passes, k, n)
}

pub(crate) fn validate_run(
    data: &Dataset,
    hp: &Hyperparams,
    w0: &ModelState,
    net: &NetworkModel,
    controller: Option<&ControllerState>,
) -> Result<()> {
    hp.validate()?;
    net.validate()?;
    w0.check_finite()?;
    if data.n() != w0.n() {
        return Err(Error::dim(w0.n(), data.n()));
    }
    if hp.workers > data.m() {
        return Err(Error::TooManyWorkers {
            workers: hp.workers,
            points: data.m(),
        });
    }
    if let Some(c) = controller {
        c.validate()?;
    }
    Ok(())
}

pub(crate) fn make_workers(data: &Dataset, hp: &Hyperparams, w0: &ModelState) -> Result<Vec<WorkerState>> {
    partition(data.m(), hp.workers, hp.seed)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| WorkerState::new(i, w0.clone(), p, hp.seed))
        .collect()
}

/// Runs ASGD; `controller` enables adaptive mini-batch sizes (one controller per node).
pub fn run_asgd(
    data: &Dataset,
    hp: &Hyperparams,
    w0: &ModelState,
    net: &NetworkModel,
    controller: Option<&ControllerState>,
    cfg: &AsgdConfig,
    ctx: &RunContext,
) -> Result<SolverResult> {
    validate_run(data, hp, w0, net, controller)?;
    match net.mode {
        ExecMode::Virtual => run_virtual(data, hp, w0, net, controller, cfg, ctx),
        ExecMode::WallClock => wallclock::run(data, hp, w0, net, controller, cfg, ctx),
    }
}

fn run_virtual(
    data: &Dataset,
    hp: &Hyperparams,
    w0: &ModelState,
    net: &NetworkModel,
    controller: Option<&ControllerState>,
    cfg: &AsgdConfig,
    ctx: &RunContext,
) -> Result<SolverResult> {
    let (k, n) = w0.shape();
    let mut transport = SimTransport::new(net.clone(), hp.workers)?;
    let mut workers = make_workers(data, hp, w0)?;
    let nodes = transport.nodes();
    let mut controllers: Vec<Option<ControllerState>> = vec![controller.cloned(); nodes];
    let mut node_b: Vec<usize> = vec![controller.map_or(hp.b, |c| c.b); nodes];
    let tick_every = controller.map_or(Some(DEFAULT_INTERVAL), |c| c.interval);
    let mut audit = cfg.audit.then(AuditReport::default);
    let mut queue_samples = Vec::new();

    let mut checkpoints = ctx.checkpoints(hp.iterations);
    let mut trace = vec![trace_point(ctx, w0, 0.0, &workers, node_b[0])?];
    let mut pending = vec![false; hp.workers];
    let mut events: BinaryHeap<Reverse<(u64, WorkerId)>> = (0..hp.workers).map(|i| Reverse((0f64.to_bits(), i))).collect();

    while let Some(Reverse((bits, i))) = events.pop() {
        let now = f64::from_bits(bits);
        transport.advance(now)?;
        let node = net.node_of(i);
        let lead = i == node * net.workers_per_node;

        if pending[i] {
            pending[i] = false;
            let ws = &mut workers[i];
            ws.publish(&mut transport, hp.workers, cfg.send_every, now)?;
            if lead && tick_every.is_some_and(|every| ws.t % every == 0) {
                let q0 = transport.queue_size(i);
                if let Some(cs) = controllers[node].as_mut() {
                    *cs = adapt(cs, q0);
                    node_b[node] = cs.b;
                }
                queue_samples.push(QueueSample {
                    time: now,
                    node,
                    occupancy: q0,
                    b: node_b[node],
                });
            }
            if i == 0 {
                let done = !ctx.keep_going(ws.t as usize, hp.iterations, ws.samples);
                if checkpoints.hit(ws.t, ws.samples) || done {
                    let p = trace_point(ctx, &workers[0].w, now, &workers, node_b[0])?;
                    trace.push(p);
                }
            }
        }

        let ws = &mut workers[i];
        if !ctx.keep_going(ws.t as usize, hp.iterations, ws.samples) {
            continue;
        }
        let incoming = transport.poll_receive(i);
        let outcome = ws.compute_step(data, node_b[node], hp.epsilon, incoming.as_ref(), audit.as_mut())?;
        let posts = ws.sends_now(hp.workers, cfg.send_every);
        let d = step_cost(&ctx.cost, k, n, &outcome, posts);
        pending[i] = true;
        events.push(Reverse(((now + d).to_bits(), i)));
    }

    for ws in &workers {
        ws.w.check_finite()?;
    }
    let stats = RunStats {
        messages_sent: workers.iter().map(|w| w.stats.messages_sent).sum(),
        messages_refused: workers.iter().map(|w| w.stats.messages_refused).sum(),
        messages_received: workers.iter().map(|w| w.stats.messages_received).sum(),
        messages_accepted: workers.iter().map(|w| w.stats.messages_accepted).sum(),
        overwrites: transport.total_overwrites(),
        queue_samples,
        audit,
    };
    Ok(SolverResult {
        final_state: workers[0].w.clone(),
        worker_states: workers.into_iter().map(|w| w.w).collect(),
        trace,
        stats,
    })
}

pub(crate) fn trace_point(
    ctx: &RunContext,
    w: &ModelState,
    time: f64,
    workers: &[WorkerState],
    b: usize,
) -> Result<TracePoint> {
    let (quant_error, gt_error) = ctx.probe.measure(w)?;
    Ok(TracePoint {
        samples: workers.iter().map(|w| w.samples).sum(),
        time,
        quant_error,
        gt_error,
        msgs_sent: workers.iter().map(|w| w.stats.messages_sent).sum(),
        msgs_accepted: workers.iter().map(|w| w.stats.messages_accepted).sum(),
        b_current: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use crate::objective::GroundTruth;
    use crate::sampling::{initial_state, InitStrategy};
    use crate::solvers::simuparallel_sgd;

    fn scalar(v: f64) -> ModelState {
        ModelState::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn parzen_examples() {
        assert!(parzen_accept(&scalar(0.0), &scalar(1.0), &scalar(-5.0), 0.1).unwrap());
        assert!(!parzen_accept(&scalar(0.0), &scalar(-1.0), &scalar(-5.0), 0.1).unwrap());
        // External state exactly at the post-step position.
        assert!(parzen_accept(&scalar(0.0), &scalar(0.5), &scalar(-5.0), 0.1).unwrap());
        // A zero step never gets strictly closer.
        assert!(!parzen_accept(&scalar(0.0), &scalar(0.0), &scalar(0.0), 0.1).unwrap());
        assert!(parzen_accept(&scalar(0.0), &ModelState::zeros(1, 2), &scalar(1.0), 0.1).is_err());
    }

    #[test]
    fn merge_examples() {
        let d = scalar(0.5);
        assert_eq!(merge_update(&scalar(2.0), None, &d, 0.1).unwrap(), d);
        // Identical states: the external term vanishes.
        let w = ModelState::new(1, 2, vec![1.0, 1.0]).unwrap();
        let step = ModelState::new(1, 2, vec![0.3, -0.2]).unwrap();
        assert_eq!(merge_update(&w, Some(&w), &step, 0.1).unwrap(), step);
        assert_eq!(merge_update(&scalar(2.0), Some(&scalar(0.0)), &d, 0.1).unwrap().as_slice(), &[1.5]);
        // Rejected external state leaves the step alone.
        assert_eq!(merge_update(&scalar(0.0), Some(&scalar(-1.0)), &scalar(-5.0), 0.1).unwrap().as_slice(), &[-5.0]);
        assert!(merge_update(&w, Some(&scalar(0.0)), &step, 0.1).is_err());
    }

    fn problem() -> (Dataset, GroundTruth) {
        generate(&SyntheticSpec {
            n: 3,
            m: 1200,
            k: 4,
            min_center_dist: 4.0,
            cluster_sigma: 0.5,
            seed: 8,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn hp(b: usize, iterations: usize, workers: usize) -> Hyperparams {
        Hyperparams {
            epsilon: 0.02,
            b,
            iterations,
            workers,
            seed: 21,
        }
    }

    #[test]
    fn single_worker_step_is_plain_minibatch_step() {
        let (d, _) = problem();
        let w0 = initial_state(&d, 4, 1, InitStrategy::Sample).unwrap();
        let h = hp(5, 1, 1);
        let mut t = SimTransport::new(NetworkModel::infiniband(), 1).unwrap();
        let mut ws = make_workers(&d, &h, &w0).unwrap().remove(0);
        worker_step(&mut ws, &d, &h, &mut t, 0.0).unwrap();
        let reference = simuparallel_sgd(&d, &h, &w0, &RunContext::new(&d, None)).unwrap();
        assert_eq!(ws.w, reference.final_state);
        assert_eq!(ws.stats, WorkerCounters::default());
    }

    fn one_point_worker(x: f64, w: f64) -> (Dataset, WorkerState) {
        let d = Dataset::new(1, 1, vec![x]).unwrap();
        let ws = WorkerState::new(0, scalar(w), vec![0], 0).unwrap();
        (d, ws)
    }

    #[test]
    fn rejected_message_matches_no_message() {
        // Local step moves w from 0 towards 10; the external state sits behind.
        let (d, mut a) = one_point_worker(10.0, 0.0);
        let mut b = a.clone();
        let ext = UpdateMessage {
            state: scalar(-3.0),
            sender: 1,
            sender_iteration: 4,
        };
        a.compute_step(&d, 1, 0.1, Some(&ext), None).unwrap();
        b.compute_step(&d, 1, 0.1, None, None).unwrap();
        assert_eq!(a.w.as_slice()[0].to_bits(), b.w.as_slice()[0].to_bits());
        assert_eq!(a.stats.messages_received, 1);
        assert_eq!(a.stats.messages_accepted, 0);
    }

    #[test]
    fn accepted_message_hand_computed() {
        // g = -(x - w) = -(10 - 2) = -8; post-step 2.8 is closer to 5 than 2 is.
        let (d, mut ws) = one_point_worker(10.0, 2.0);
        let ext = UpdateMessage {
            state: scalar(5.0),
            sender: 1,
            sender_iteration: 0,
        };
        ws.compute_step(&d, 1, 0.1, Some(&ext), None).unwrap();
        let merged = 0.5 * (2.0 - 5.0) + (-8.0);
        let expected = 2.0 - 0.1 * merged;
        assert!((ws.w.as_slice()[0] - expected).abs() < 1e-15);
        assert_eq!(ws.stats.messages_accepted, 1);
    }

    #[test]
    fn single_worker_run_equals_simuparallel() {
        let (d, gt) = problem();
        let w0 = initial_state(&d, 4, 2, InitStrategy::Sample).unwrap();
        let ctx = RunContext::new(&d, Some(gt));
        let h = hp(7, 150, 1);
        let a = run_asgd(&d, &h, &w0, &NetworkModel::ethernet(), None, &AsgdConfig::default(), &ctx).unwrap();
        let b = simuparallel_sgd(&d, &h, &w0, &ctx).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn no_communication_equals_simuparallel_workers() {
        let (d, _) = problem();
        let w0 = initial_state(&d, 4, 2, InitStrategy::Sample).unwrap();
        let ctx = RunContext::new(&d, None);
        let h = hp(7, 120, 4);
        let cfg = AsgdConfig {
            send_every: None,
            audit: false,
        };
        let a = run_asgd(&d, &h, &w0, &NetworkModel::infiniband(), None, &cfg, &ctx).unwrap();
        let b = simuparallel_sgd(&d, &h, &w0, &ctx).unwrap();
        assert_eq!(a.worker_states, b.worker_states);
        assert_eq!(a.stats.messages_sent, 0);
    }

    #[test]
    fn multi_worker_run_counts_and_audit() {
        let (d, gt) = problem();
        let w0 = initial_state(&d, 4, 3, InitStrategy::Sample).unwrap();
        let ctx = RunContext::new(&d, Some(gt));
        let cfg = AsgdConfig {
            audit: true,
            ..Default::default()
        };
        let r = run_asgd(&d, &hp(4, 300, 4), &w0, &NetworkModel::infiniband(), None, &cfg, &ctx).unwrap();
        let s = &r.stats;
        assert!(s.messages_received > 0);
        assert!(s.messages_accepted <= s.messages_received);
        assert!(s.messages_received <= s.messages_sent);
        let audit = s.audit.as_ref().unwrap();
        assert_eq!(audit.violations(), 0);
        assert_eq!(audit.accepted_checked + audit.rejected_checked, s.messages_received);
        assert!(r.final_point().quant_error < r.trace[0].quant_error);
    }

    #[test]
    fn backpressure_never_stalls_workers() {
        let (d, _) = problem();
        let w0 = initial_state(&d, 4, 3, InitStrategy::Sample).unwrap();
        let ctx = RunContext::new(&d, None);
        let slow = NetworkModel {
            bandwidth: 10.0,
            latency: 1.0,
            queue_capacity: 1,
            ..NetworkModel::ethernet()
        };
        let h = hp(4, 200, 3);
        let fast = run_asgd(&d, &h, &w0, &NetworkModel::infiniband(), None, &AsgdConfig::default(), &ctx).unwrap();
        let r = run_asgd(&d, &h, &w0, &slow, None, &AsgdConfig::default(), &ctx).unwrap();
        assert_eq!(r.final_point().samples, fast.final_point().samples);
        assert!(r.stats.messages_refused > 0);
    }

    #[test]
    fn virtual_runs_are_reproducible() {
        let (d, gt) = problem();
        let w0 = initial_state(&d, 4, 3, InitStrategy::Sample).unwrap();
        let ctx = RunContext::new(&d, Some(gt));
        let cs = ControllerState::with_defaults(16, 8);
        let run = || run_asgd(&d, &hp(16, 100, 4), &w0, &NetworkModel::ethernet(), Some(&cs), &AsgdConfig::default(), &ctx).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_more_workers_than_points() {
        let d = Dataset::new(2, 1, vec![0.0, 1.0]).unwrap();
        let w0 = scalar(0.0);
        let err = run_asgd(&d, &hp(1, 1, 3), &w0, &NetworkModel::default(), None, &AsgdConfig::default(), &RunContext::new(&d, None));
        assert!(matches!(err, Err(Error::TooManyWorkers { .. })));
    }
}
