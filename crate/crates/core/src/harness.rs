//! Experiment driver: repeated folds, median traces, sweeps and preset comparisons.
//!
//! Files written for an output prefix `P`:
//!
//! | file                   | contents                                          |
//! |------------------------|---------------------------------------------------|
//! | `P.fold<i>.csv`        | trace of fold `i` ([`TRACE_HEADER`])              |
//! | `P.fold<i>.queue.csv`  | queue observations of fold `i` ([`QUEUE_HEADER`]) |
//! | `P.median.csv`         | element-wise lower median of the fold traces      |
//! | `P.summary.csv`        | one row per fold ([`SUMMARY_HEADER`])             |
//! | `P.manifest`           | the resolved configuration                        |
//! | `P.sweep.csv`          | sweep summary ([`SWEEP_HEADER`])                  |
//! | `P.compare.csv`        | preset comparison ([`COMPARE_HEADER`])            |
//!
//! Fold `i` uses seed `seed + i`; synthetic data is regenerated with
//! `data_seed + i`. Runtime to target is the virtual time of the first
//! checkpoint whose ground-truth error is below the fold's target, which
//! defaults to `target_factor` times the best error batch descent reaches from
//! the same start. Traces of different folds are aligned by row index and cut
//! to the shortest one.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::asgd::{run_asgd, AsgdConfig};
use crate::config::{DataSource, ExperimentConfig, Solver, SweepConfig};
use crate::datagen::generate;
use crate::error::{Error, Result};
use crate::model::{CostModel, Hyperparams, ModelState};
use crate::objective::{Dataset, GroundTruth};
use crate::sampling::initial_state;
use crate::solvers::{batch_gd, sgd_run, simuparallel_sgd};
use crate::trace::{Probe, RunContext, RunStats, SolverResult, TracePoint};

pub const TRACE_HEADER: [&str; 7] = [
    "time_s",
    "samples",
    "quant_error",
    "gt_error",
    "msgs_sent",
    "msgs_accepted",
    "b_current",
];
pub const QUEUE_HEADER: [&str; 4] = ["time_s", "node", "occupancy", "b"];
pub const SUMMARY_HEADER: [&str; 12] = [
    "fold",
    "seed",
    "target",
    "runtime_to_target",
    "final_gt_error",
    "final_quant_error",
    "msgs_sent",
    "msgs_refused",
    "msgs_received",
    "msgs_accepted",
    "overwrites",
    "mean_queue_tail",
];
pub const SWEEP_HEADER: [&str; 4] = [
    "value",
    "median_runtime_to_target",
    "median_final_gt_error",
    "median_msgs_accepted",
];
pub const COMPARE_HEADER: [&str; 7] = [
    "preset",
    "bandwidth",
    "latency",
    "median_runtime_to_target",
    "median_final_gt_error",
    "median_msgs_accepted",
    "runtime_ratio",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub target: Option<f64>,
    /// `None` when the target was never reached (or there is no target).
    pub runtime_to_target: Option<f64>,
    pub trace: Vec<TracePoint>,
    pub stats: RunStats,
    /// Mean queue occupancy over the second half of the queue observations.
    pub mean_queue_tail: Option<f64>,
}

impl FoldReport {
    pub fn final_point(&self) -> &TracePoint {
        self.trace.last().expect("traces are never empty")
    }

    /// Runtime to target with "never" mapped to infinity and "no target" to NaN.
    pub fn runtime_or_inf(&self) -> f64 {
        match (self.target, self.runtime_to_target) {
            (None, _) => f64::NAN,
            (Some(_), None) => f64::INFINITY,
            (Some(_), Some(t)) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub folds: Vec<FoldReport>,
    pub median_trace: Vec<TracePoint>,
    pub median_runtime_to_target: f64,
    pub median_final_gt_error: f64,
    pub median_msgs_accepted: u64,
    pub files: Vec<PathBuf>,
}

/// Lower median; NaN sorts last.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

fn lower_median_u64(values: &[u64]) -> u64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Element-wise lower median of traces aligned by row index.
pub fn median_trace(traces: &[Vec<TracePoint>]) -> Vec<TracePoint> {
    let rows = traces.iter().map(Vec::len).min().unwrap_or(0);
    (0..rows)
        .map(|r| {
            let col = |f: fn(&TracePoint) -> f64| lower_median(&traces.iter().map(|t| f(&t[r])).collect::<Vec<_>>());
            let col_u = |f: fn(&TracePoint) -> u64| lower_median_u64(&traces.iter().map(|t| f(&t[r])).collect::<Vec<_>>());
            TracePoint {
                time: col(|p| p.time),
                samples: col_u(|p| p.samples),
                quant_error: col(|p| p.quant_error),
                gt_error: col(|p| p.gt_error),
                msgs_sent: col_u(|p| p.msgs_sent),
                msgs_accepted: col_u(|p| p.msgs_accepted),
                b_current: col_u(|p| p.b_current as u64) as usize,
            }
        })
        .collect()
}

/// Batch-derived targets keyed by fold, reusable while data and start state stay fixed.
#[derive(Debug, Default, Clone)]
pub struct TargetCache {
    targets: HashMap<usize, Option<f64>>,
}

/// Dataset, ground truth (if known) and start state of one fold.
pub struct FoldInput {
    pub data: Dataset,
    pub truth: Option<GroundTruth>,
    pub seed: u64,
    pub w0: ModelState,
}

pub fn fold_input(cfg: &ExperimentConfig, fold: usize) -> Result<FoldInput> {
    let (data, truth) = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = spec.seed.wrapping_add(fold as u64);
            let (d, t) = generate(&spec)?;
            (d, Some(t))
        }
        DataSource::File { points, truth } => {
            let d = Dataset::read_from(points)?;
            let t = truth.as_ref().map(GroundTruth::read_from).transpose()?;
            (d, t)
        }
    };
    let seed = cfg.hp.seed.wrapping_add(fold as u64);
    let w0 = initial_state(&data, cfg.spec.k, seed, cfg.init)?;
    Ok(FoldInput { data, truth, seed, w0 })
}

fn context(cfg: &ExperimentConfig, input: &FoldInput) -> RunContext {
    RunContext {
        probe: Probe::new(&input.data, input.truth.clone(), cfg.eval_points),
        cost: CostModel {
            seconds_per_flop: cfg.flop_time,
        },
        sample_budget: cfg.samples,
    }
}

fn fold_target(cfg: &ExperimentConfig, input: &FoldInput, ctx: &RunContext) -> Result<Option<f64>> {
    if let Some(t) = cfg.target {
        return Ok(Some(t));
    }
    if input.truth.is_none() {
        return Ok(None);
    }
    let hp = Hyperparams {
        epsilon: cfg.batch_epsilon(),
        iterations: cfg.batch_epochs,
        ..cfg.hp.clone()
    };
    let ctx = RunContext {
        sample_budget: None,
        ..ctx.clone()
    };
    let r = batch_gd(&input.data, &hp, &input.w0, &ctx)?;
    let best = r.trace.iter().map(|p| p.gt_error).fold(f64::INFINITY, f64::min);
    Ok(Some(cfg.target_factor * best))
}

/// Runs the configured solver on one fold.
pub fn run_solver(cfg: &ExperimentConfig, input: &FoldInput, ctx: &RunContext) -> Result<SolverResult> {
    let hp = Hyperparams {
        seed: input.seed,
        ..cfg.hp.clone()
    };
    let (d, w0) = (&input.data, &input.w0);
    match cfg.solver {
        Solver::Sgd => sgd_run(d, &hp, w0, ctx),
        Solver::SimuParallel => simuparallel_sgd(d, &hp, w0, ctx),
        Solver::Batch => batch_gd(d, &hp, w0, ctx),
        Solver::Asgd => {
            let controller = cfg.adaptive_b.then(|| cfg.controller());
            let engine = AsgdConfig {
                send_every: cfg.send_every,
                audit: cfg.audit,
            };
            run_asgd(d, &hp, w0, &cfg.network, controller.as_ref(), &engine, ctx)
        }
    }
}

fn run_fold(cfg: &ExperimentConfig, fold: usize, cache: &mut TargetCache) -> Result<FoldReport> {
    let input = fold_input(cfg, fold)?;
    let ctx = context(cfg, &input);
    let target = match cache.targets.get(&fold) {
        Some(t) => *t,
        None => {
            let t = fold_target(cfg, &input, &ctx)?;
            cache.targets.insert(fold, t);
            t
        }
    };
    let r = run_solver(cfg, &input, &ctx)?;
    let qs = &r.stats.queue_samples;
    let tail = &qs[qs.len() / 2..];
    let mean_queue_tail = (!tail.is_empty()).then(|| tail.iter().map(|q| q.occupancy as f64).sum::<f64>() / tail.len() as f64);
    Ok(FoldReport {
        fold,
        seed: input.seed,
        target,
        runtime_to_target: target.and_then(|t| r.time_to_target(t)),
        trace: r.trace,
        stats: r.stats,
        mean_queue_tail,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn f(v: f64) -> String {
    v.to_string()
}

fn opt_f(v: Option<f64>) -> String {
    v.map_or_else(String::new, f)
}

pub fn write_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for p in trace {
        w.write_record([
            f(p.time),
            p.samples.to_string(),
            f(p.quant_error),
            f(p.gt_error),
            p.msgs_sent.to_string(),
            p.msgs_accepted.to_string(),
            p.b_current.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace CSV written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<Vec<TracePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::Format {
            what: "trace csv",
            reason: format!("unexpected header {header:?}"),
        });
    }
    let parse_err = |e: String| Error::Format {
        what: "trace csv",
        reason: e,
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            let g = |i: usize| rec.get(i).unwrap_or("");
            let pf = |i: usize| g(i).parse::<f64>().map_err(|e| parse_err(format!("{}: {e}", g(i))));
            let pu = |i: usize| g(i).parse::<u64>().map_err(|e| parse_err(format!("{}: {e}", g(i))));
            Ok(TracePoint {
                time: pf(0)?,
                samples: pu(1)?,
                quant_error: pf(2)?,
                gt_error: pf(3)?,
                msgs_sent: pu(4)?,
                msgs_accepted: pu(5)?,
                b_current: pu(6)? as usize,
            })
        })
        .collect()
}

fn write_fold_files(prefix: &Path, fold: &FoldReport, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = with_suffix(prefix, &format!(".fold{}.csv", fold.fold));
    write_trace(&path, &fold.trace)?;
    files.push(path);
    if !fold.stats.queue_samples.is_empty() {
        let path = with_suffix(prefix, &format!(".fold{}.queue.csv", fold.fold));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(QUEUE_HEADER)?;
        for q in &fold.stats.queue_samples {
            w.write_record([f(q.time), q.node.to_string(), q.occupancy.to_string(), q.b.to_string()])?;
        }
        w.flush()?;
        files.push(path);
    }
    Ok(())
}

fn write_summary(path: &Path, folds: &[FoldReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in folds {
        let s = &r.stats;
        let last = r.final_point();
        w.write_record([
            r.fold.to_string(),
            r.seed.to_string(),
            opt_f(r.target),
            f(r.runtime_or_inf()),
            f(last.gt_error),
            f(last.quant_error),
            s.messages_sent.to_string(),
            s.messages_refused.to_string(),
            s.messages_received.to_string(),
            s.messages_accepted.to_string(),
            s.overwrites.to_string(),
            opt_f(r.mean_queue_tail),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every fold and writes the per-fold, median, summary and manifest files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_cached(cfg, &mut TargetCache::default())
}

/// [`run_experiment`] reusing batch targets from `cache`.
pub fn run_experiment_cached(cfg: &ExperimentConfig, cache: &mut TargetCache) -> Result<ExperimentReport> {
    cfg.validate()?;
    let folds = (0..cfg.folds)
        .map(|i| run_fold(cfg, i, cache).map_err(|e| Error::Fold { fold: i, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;

    ensure_parent(&cfg.out)?;
    let mut files = Vec::new();
    for fold in &folds {
        write_fold_files(&cfg.out, fold, &mut files)?;
    }
    let traces: Vec<Vec<TracePoint>> = folds.iter().map(|r| r.trace.clone()).collect();
    let median = median_trace(&traces);
    let path = with_suffix(&cfg.out, ".median.csv");
    write_trace(&path, &median)?;
    files.push(path);
    let path = with_suffix(&cfg.out, ".summary.csv");
    write_summary(&path, &folds)?;
    files.push(path);
    let path = with_suffix(&cfg.out, ".manifest");
    fs::write(&path, manifest_text(cfg))?;
    files.push(path);

    let runtimes: Vec<f64> = folds.iter().map(FoldReport::runtime_or_inf).collect();
    let finals: Vec<f64> = folds.iter().map(|r| r.final_point().gt_error).collect();
    let accepted: Vec<u64> = folds.iter().map(|r| r.stats.messages_accepted).collect();
    Ok(ExperimentReport {
        median_runtime_to_target: lower_median(&runtimes),
        median_final_gt_error: lower_median(&finals),
        median_msgs_accepted: lower_median_u64(&accepted),
        folds,
        median_trace: median,
        files,
    })
}

fn manifest_text(cfg: &ExperimentConfig) -> String {
    format!(
        "# resolved configuration; rerun with `asgd run --config <this file>`\n{}",
        cfg.to_manifest()
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub median_runtime_to_target: f64,
    pub median_final_gt_error: f64,
    pub median_msgs_accepted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<ExperimentReport>,
    pub summary: PathBuf,
}

/// One experiment per value; outputs go to `<out>.<var><value>.*` plus `<out>.sweep.csv`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate()?;
    // Targets only depend on data and start state, which no sweep variable changes.
    let mut cache = TargetCache::default();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &value in &cfg.values {
        let mut run = cfg.at(value)?;
        run.out = with_suffix(&cfg.base.out, &format!(".{}{}", cfg.var.key(), value));
        let report = run_experiment_cached(&run, &mut cache)?;
        rows.push(SweepRow {
            value,
            median_runtime_to_target: report.median_runtime_to_target,
            median_final_gt_error: report.median_final_gt_error,
            median_msgs_accepted: report.median_msgs_accepted,
        });
        runs.push(report);
    }
    let summary = with_suffix(&cfg.base.out, ".sweep.csv");
    ensure_parent(&summary)?;
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(SWEEP_HEADER)?;
    for r in &rows {
        w.write_record([
            f(r.value),
            f(r.median_runtime_to_target),
            f(r.median_final_gt_error),
            r.median_msgs_accepted.to_string(),
        ])?;
    }
    w.flush()?;
    let manifest = format!(
        "{}sweep_var = {}\nsweep_values = {}\n",
        manifest_text(&cfg.base),
        cfg.var.key(),
        cfg.values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    );
    fs::write(with_suffix(&cfg.base.out, ".sweep.manifest"), manifest)?;
    Ok(SweepReport { rows, runs, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub preset: String,
    pub median_runtime_to_target: f64,
    pub median_final_gt_error: f64,
    pub median_msgs_accepted: u64,
    /// Runtime relative to the first preset.
    pub runtime_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub runs: Vec<ExperimentReport>,
    pub summary: PathBuf,
}

/// Runs `cfg` once per network preset; outputs go to `<out>.<preset>.*` plus `<out>.compare.csv`.
pub fn compare_presets(cfg: &ExperimentConfig, presets: &[String]) -> Result<CompareReport> {
    if presets.is_empty() {
        return Err(Error::Config {
            key: "presets".into(),
            reason: "need at least one preset".into(),
        });
    }
    let mut cache = TargetCache::default();
    let mut rows: Vec<CompareRow> = Vec::new();
    let mut runs = Vec::new();
    let mut nets = Vec::new();
    for (i, preset) in presets.iter().enumerate() {
        let mut run = cfg.clone();
        run.set("network", preset)?;
        run.out = with_suffix(&cfg.out, &format!(".{i}.{preset}"));
        let report = run_experiment_cached(&run, &mut cache)?;
        let base = rows.first().map_or(report.median_runtime_to_target, |r| r.median_runtime_to_target);
        rows.push(CompareRow {
            preset: preset.clone(),
            median_runtime_to_target: report.median_runtime_to_target,
            median_final_gt_error: report.median_final_gt_error,
            median_msgs_accepted: report.median_msgs_accepted,
            runtime_ratio: report.median_runtime_to_target / base,
        });
        nets.push(run.network);
        runs.push(report);
    }
    let summary = with_suffix(&cfg.out, ".compare.csv");
    ensure_parent(&summary)?;
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(COMPARE_HEADER)?;
    for (r, net) in rows.iter().zip(&nets) {
        w.write_record([
            r.preset.clone(),
            f(net.bandwidth),
            f(net.latency),
            f(r.median_runtime_to_target),
            f(r.median_final_gt_error),
            r.median_msgs_accepted.to_string(),
            f(r.runtime_ratio),
        ])?;
    }
    w.flush()?;
    Ok(CompareReport { rows, runs, summary })
}
