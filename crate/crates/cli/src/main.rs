//! `asgd` command line: generate data, run experiments, sweep parameters and compare network presets.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use asgd_core::config::{parse_values, ExperimentConfig, SweepConfig};
use asgd_core::harness::{compare_presets, run_experiment, run_sweep, ExperimentReport};
use asgd_core::{generate, SweepVar};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asgd", version, about = "Asynchronous SGD experiments on K-Means")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (`<out>.data`) and its centers (`<out>.truth`).
    Generate(GenerateArgs),
    /// Run one experiment over all folds.
    Run(ExperimentArgs),
    /// Run one experiment per value of a swept parameter.
    Sweep(SweepArgs),
    /// Run the same experiment under several network presets.
    Compare(CompareArgs),
}

/// Flags shared by every experiment subcommand. Each one mirrors a config key.
#[derive(Args)]
struct ExperimentArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Mini-batch steps per worker, or `inf` with a `samples` budget.
    #[arg(long)]
    iterations: Option<String>,
    /// Network preset: infiniband or ethernet.
    #[arg(long)]
    network: Option<String>,
    /// Bytes per second per node.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Seconds per message.
    #[arg(long)]
    latency: Option<f64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    /// Enable the mini-batch size controller.
    #[arg(long)]
    adaptive_b: bool,
    #[arg(long)]
    q_opt: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path prefix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, e.g. `--set samples=20000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExperimentArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let s = |v: &dyn ToString| v.to_string();
        let pairs: Vec<(&str, Option<String>)> = vec![
            ("solver", self.solver.clone()),
            ("network", self.network.clone()),
            ("b", self.b.map(|v| s(&v))),
            ("epsilon", self.epsilon.map(|v| s(&v))),
            ("workers", self.workers.map(|v| s(&v))),
            ("iterations", self.iterations.clone()),
            ("bandwidth", self.bandwidth.map(|v| s(&v))),
            ("latency", self.latency.map(|v| s(&v))),
            ("queue_capacity", self.queue_capacity.map(|v| s(&v))),
            ("adaptive_b", self.adaptive_b.then(|| "true".to_string())),
            ("q_opt", self.q_opt.map(|v| s(&v))),
            ("gamma", self.gamma.map(|v| s(&v))),
            ("folds", self.folds.map(|v| s(&v))),
            ("seed", self.seed.map(|v| s(&v))),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    fn config_text(&self) -> Result<String> {
        match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(String::new()),
        }
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_text(&self.config_text()?)?;
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Config file with the synthetic keys (n, m, k, min_center_dist, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    min_center_dist: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long = "box")]
    box_half_width: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// b, workers or bandwidth.
    #[arg(long)]
    var: Option<String>,
    /// Comma separated values.
    #[arg(long)]
    values: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Comma separated preset names.
    #[arg(long, default_value = "infiniband,ethernet")]
    presets: String,
}

fn print_report(report: &ExperimentReport) {
    for f in &report.folds {
        let last = f.final_point();
        println!(
            "fold {:>2}  seed {:>6}  target {:>10}  runtime {:>12}  final gt {:.6}  accepted {}",
            f.fold,
            f.seed,
            f.target.map_or("-".into(), |t| format!("{t:.4}")),
            format!("{:.6}", f.runtime_or_inf()),
            last.gt_error,
            f.stats.messages_accepted
        );
    }
    println!(
        "median runtime to target {:.6} s, final gt error {:.6}, accepted messages {}",
        report.median_runtime_to_target, report.median_final_gt_error, report.median_msgs_accepted
    );
    for p in &report.files {
        println!("wrote {}", p.display());
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => {
            let text = match &a.config {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            let mut cfg = ExperimentConfig::from_text(&text)?;
            let s = |v: &dyn ToString| v.to_string();
            let pairs = [
                ("n", a.n.map(|v| s(&v))),
                ("m", a.m.map(|v| s(&v))),
                ("k", a.k.map(|v| s(&v))),
                ("min_center_dist", a.min_center_dist.map(|v| s(&v))),
                ("cluster_sigma", a.sigma.map(|v| s(&v))),
                ("box_half_width", a.box_half_width.map(|v| s(&v))),
                ("data_seed", a.seed.map(|v| s(&v))),
            ];
            for (k, v) in pairs {
                if let Some(v) = v {
                    cfg.set(k, &v)?;
                }
            }
            for kv in &a.set {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got `{kv}`");
                };
                cfg.set(k.trim(), v.trim())?;
            }
            let (data, truth) = generate(&cfg.spec)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let dp = PathBuf::from(format!("{}.data", a.out.display()));
            let tp = PathBuf::from(format!("{}.truth", a.out.display()));
            data.write_to(&dp)?;
            truth.write_to(&tp)?;
            println!("wrote {} ({} x {})", dp.display(), data.m(), data.n());
            println!("wrote {} ({} centers)", tp.display(), truth.k());
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let report = run_experiment(&cfg)?;
            print_report(&report);
        }
        Command::Sweep(a) => {
            let text = a.exp.config_text()?;
            let mut sweep = if text.contains("sweep_var") || text.contains("sweep_values") {
                SweepConfig::from_text(&text)?
            } else {
                SweepConfig {
                    base: ExperimentConfig::from_text(&text)?,
                    var: SweepVar::B,
                    values: Vec::new(),
                }
            };
            a.exp.apply(&mut sweep.base)?;
            if let Some(v) = &a.var {
                sweep.var = v.parse()?;
            }
            if let Some(v) = &a.values {
                sweep.values = parse_values(v)?;
            }
            let report = run_sweep(&sweep)?;
            println!("{:>12}  {:>24}  {:>22}  {:>20}", sweep.var.key(), "median_runtime_to_target", "median_final_gt_error", "median_msgs_accepted");
            for r in &report.rows {
                println!(
                    "{:>12}  {:>24.6}  {:>22.6}  {:>20}",
                    r.value, r.median_runtime_to_target, r.median_final_gt_error, r.median_msgs_accepted
                );
            }
            println!("wrote {}", report.summary.display());
        }
        Command::Compare(a) => {
            let cfg = a.exp.resolve()?;
            let presets: Vec<String> = a.presets.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            let report = compare_presets(&cfg, &presets)?;
            for r in &report.rows {
                println!(
                    "{:>12}  runtime {:>12.6}  final gt {:>10.6}  accepted {:>8}  ratio {:.3}",
                    r.preset, r.median_runtime_to_target, r.median_final_gt_error, r.median_msgs_accepted, r.runtime_ratio
                );
            }
            println!("wrote {}", report.summary.display());
        }
    }
    Ok(())
}
