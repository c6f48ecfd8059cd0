//! Comparison optimizers: sequential mini-batch SGD, communication-free
//! parallel SGD (workers average once at the end) and full-batch descent.

use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelState};
use crate::objective::{accumulate_indices, Dataset};
use crate::sampling::{partition, worker_rng, LocalSampler};
use crate::trace::{RunContext, RunStats, SolverResult, TracePoint};

/// `w -= eps * grad`, the generic descent step shared by every solver.
#[inline]
pub(crate) fn descend(w: &mut ModelState, eps: f64, grad: &ModelState) {
    for (wi, gi) in w.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *wi -= eps * gi;
    }
}

/// Fills `grad` with the solver-facing gradient of a mini-batch: the negated
/// K-Means update, so that [`descend`] moves centers toward their samples.
pub(crate) fn batch_gradient(data: &Dataset, batch: &[usize], w: &ModelState, grad: &mut ModelState) {
    grad.fill(0.0);
    accumulate_indices(data, batch, w, grad);
    for g in grad.as_mut_slice() {
        *g = -*g;
    }
}

fn check_inputs(data: &Dataset, hp: &Hyperparams, w0: &ModelState) -> Result<()> {
    hp.validate()?;
    w0.check_finite()?;
    if data.n() != w0.n() {
        return Err(Error::dim(w0.n(), data.n()));
    }
    Ok(())
}

fn point(ctx: &RunContext, w: &ModelState, samples: u64, time: f64, b: usize) -> Result<TracePoint> {
    let (quant_error, gt_error) = ctx.probe.measure(w)?;
    Ok(TracePoint {
        samples,
        time,
        quant_error,
        gt_error,
        msgs_sent: 0,
        msgs_accepted: 0,
        b_current: b,
    })
}

/// Sequential mini-batch SGD; with `b = 1` this is plain single-sample SGD.
///
/// Draws from the whole dataset through the same sampler a single parallel
/// worker would use, so it replays `simuparallel_sgd` with one worker exactly.
pub fn sgd_run(data: &Dataset, hp: &Hyperparams, w0: &ModelState, ctx: &RunContext) -> Result<SolverResult> {
    let single = Hyperparams {
        workers: 1,
        ..hp.clone()
    };
    simuparallel_sgd(data, &single, w0, ctx)
}

/// Communication-free parallel SGD.
///
/// Each worker runs mini-batch SGD on its own partition from `w0`; the
/// returned state is the component-wise mean of the worker states. Trace
/// rows report the mean of the worker states at that checkpoint, i.e. what
/// the method would return if stopped there.
pub fn simuparallel_sgd(
    data: &Dataset,
    hp: &Hyperparams,
    w0: &ModelState,
    ctx: &RunContext,
) -> Result<SolverResult> {
    check_inputs(data, hp, w0)?;
    let parts = partition(data.m(), hp.workers, hp.seed)?;
    let mut samplers = parts
        .into_iter()
        .enumerate()
        .map(|(i, p)| LocalSampler::new(p, worker_rng(hp.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let (k, n) = w0.shape();
    let mut states = vec![w0.clone(); hp.workers];
    let mut grad = ModelState::zeros(k, n);
    let mut batch = Vec::with_capacity(hp.b);
    let step_time = ctx.cost.gradient(hp.b, k, n) + ctx.cost.state_passes(1, k, n);

    let mut checkpoints = ctx.checkpoints(hp.iterations);
    let mut trace = vec![point(ctx, w0, 0, 0.0, hp.b)?];
    let mut step = 0usize;
    let mut local_samples = 0u64;
    // Accumulated rather than multiplied so the clock matches an event-driven replay.
    let mut time = 0.0;
    let mut recorded = true;
    while ctx.keep_going(step, hp.iterations, local_samples) {
        for (w, sampler) in states.iter_mut().zip(samplers.iter_mut()) {
            sampler.draw(hp.b, &mut batch);
            batch_gradient(data, &batch, w, &mut grad);
            descend(w, hp.epsilon, &grad);
        }
        step += 1;
        local_samples += hp.b as u64;
        time += step_time;
        recorded = checkpoints.hit(step as u64, local_samples);
        if recorded {
            let avg = average(&states);
            trace.push(point(ctx, &avg, local_samples * hp.workers as u64, time, hp.b)?);
        }
    }
    let final_state = average(&states);
    if !recorded {
        trace.push(point(
            ctx,
            &final_state,
            local_samples * hp.workers as u64,
            time,
            hp.b,
        )?);
    }
    final_state.check_finite()?;
    Ok(SolverResult {
        final_state,
        trace,
        worker_states: states,
        stats: RunStats::default(),
    })
}

/// Component-wise mean; a single state is returned unchanged (bit-exact).
pub fn average(states: &[ModelState]) -> ModelState {
    let mut acc = states[0].clone();
    if states.len() == 1 {
        return acc;
    }
    for s in &states[1..] {
        for (a, v) in acc.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += v;
        }
    }
    let inv = states.len() as f64;
    for a in acc.as_mut_slice() {
        *a /= inv;
    }
    acc
}

/// Full-batch gradient descent: each iteration applies `eps / m` times the
/// summed update over the whole dataset. `hp.iterations` is the epoch count;
/// `hp.workers` only shortens the virtual time of an epoch.
pub fn batch_gd(data: &Dataset, hp: &Hyperparams, w0: &ModelState, ctx: &RunContext) -> Result<SolverResult> {
    check_inputs(data, hp, w0)?;
    let (k, n) = w0.shape();
    let m = data.m();
    let all: Vec<usize> = (0..m).collect();
    let mut w = w0.clone();
    let mut grad = ModelState::zeros(k, n);
    let epoch_time = ctx.cost.gradient(m.div_ceil(hp.workers), k, n) + ctx.cost.state_passes(1, k, n);
    let scale = hp.epsilon / m as f64;
    let mut trace = vec![point(ctx, &w, 0, 0.0, m)?];
    for epoch in 1..=hp.iterations {
        batch_gradient(data, &all, &w, &mut grad);
        descend(&mut w, scale, &grad);
        trace.push(point(ctx, &w, (epoch * m) as u64, epoch as f64 * epoch_time, m)?);
    }
    w.check_finite()?;
    Ok(SolverResult {
        final_state: w.clone(),
        trace,
        worker_states: vec![w],
        stats: RunStats::default(),
    })
}
