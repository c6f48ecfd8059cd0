//! Experiment configuration.
//!
//! Files are flat `key = value` lines; `#` starts a comment. Later lines
//! override earlier ones and command-line overrides go through the same
//! [`ExperimentConfig::set`], so a flag `--queue-capacity 8` is the key
//! `queue_capacity = 8`. [`ExperimentConfig::to_manifest`] renders every key,
//! which makes the output a complete, re-runnable config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adaptive::ControllerState;
use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::Hyperparams;
use crate::sampling::InitStrategy;
use crate::trace::DEFAULT_EVAL_POINTS;
use crate::transport::{ExecMode, NetworkModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Asgd,
    Sgd,
    SimuParallel,
    Batch,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Asgd => "asgd",
            Solver::Sgd => "sgd",
            Solver::SimuParallel => "spsgd",
            Solver::Batch => "batch",
        }
    }
}

impl FromStr for Solver {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "asgd" => Ok(Solver::Asgd),
            "sgd" => Ok(Solver::Sgd),
            "spsgd" | "simuparallel" => Ok(Solver::SimuParallel),
            "batch" => Ok(Solver::Batch),
            _ => Err("expected one of asgd, sgd, spsgd, batch".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Regenerated for every fold with seed `spec.seed + fold`.
    Synthetic(SyntheticSpec),
    File { points: PathBuf, truth: Option<PathBuf> },
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub solver: Solver,
    pub data: DataSource,
    /// Used for the synthetic generator and the model alike.
    pub spec: SyntheticSpec,
    pub hp: Hyperparams,
    /// Preset name the network was last reset to.
    pub network_name: String,
    pub network: NetworkModel,
    pub adaptive_b: bool,
    pub q_opt: Option<f64>,
    pub gamma: Option<f64>,
    pub b_min: usize,
    pub b_max: usize,
    /// `None` never invokes the controller.
    pub controller_interval: Option<u64>,
    /// `None` disables communication in ASGD.
    pub send_every: Option<u64>,
    pub folds: usize,
    /// Output path prefix.
    pub out: PathBuf,
    /// Absolute ground-truth error target; derived from batch descent when unset.
    pub target: Option<f64>,
    pub target_factor: f64,
    /// Batch step size for the target run; defaults to `0.3 * k`.
    pub batch_epsilon: Option<f64>,
    pub batch_epochs: usize,
    /// Per-worker sample budget.
    pub samples: Option<u64>,
    pub eval_points: usize,
    pub flop_time: f64,
    pub init: InitStrategy,
    pub audit: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let base = ControllerState::with_defaults(Hyperparams::default().b, 64);
        Self {
            solver: Solver::Asgd,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            spec: SyntheticSpec::default(),
            hp: Hyperparams::default(),
            network_name: "infiniband".into(),
            network: NetworkModel::infiniband(),
            adaptive_b: false,
            q_opt: None,
            gamma: None,
            b_min: base.b_min,
            b_max: base.b_max,
            controller_interval: base.interval,
            send_every: Some(1),
            folds: 1,
            out: PathBuf::from("out/run"),
            target: None,
            target_factor: 5.0,
            batch_epsilon: None,
            batch_epochs: 30,
            samples: None,
            eval_points: DEFAULT_EVAL_POINTS,
            flop_time: 1e-9,
            init: InitStrategy::Sample,
            audit: false,
        }
    }
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: format!("line {}", i + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(key, format!("`{v}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, format!("`{v}` is not a boolean"))),
    }
}

fn is_none(v: &str) -> bool {
    matches!(v.to_ascii_lowercase().as_str(), "none" | "inf" | "never" | "off" | "")
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if is_none(v) {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (_, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Applies one key. Dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "solver" => self.solver = v.parse().map_err(|e: String| bad(k, e))?,
            "data" => {
                self.data = if v == "synthetic" {
                    DataSource::Synthetic(self.spec.clone())
                } else {
                    DataSource::File {
                        points: PathBuf::from(v),
                        truth: match &self.data {
                            DataSource::File { truth, .. } => truth.clone(),
                            DataSource::Synthetic(_) => None,
                        },
                    }
                }
            }
            "truth" => match &mut self.data {
                DataSource::File { truth, .. } => *truth = (!is_none(v)).then(|| PathBuf::from(v)),
                DataSource::Synthetic(_) if is_none(v) => {}
                DataSource::Synthetic(_) => return Err(bad(k, "only valid after `data = <path>`")),
            },
            "n" => self.spec.n = num(k, v)?,
            "m" => self.spec.m = num(k, v)?,
            "k" => self.spec.k = num(k, v)?,
            "min_center_dist" => self.spec.min_center_dist = num(k, v)?,
            "cluster_sigma" => self.spec.cluster_sigma = num(k, v)?,
            "box_half_width" => self.spec.box_half_width = num(k, v)?,
            "cluster_sigmas" => {
                self.spec.cluster_sigmas = if is_none(v) {
                    None
                } else {
                    Some(v.split(',').map(|s| num(k, s.trim())).collect::<Result<_>>()?)
                }
            }
            "data_seed" => self.spec.seed = num(k, v)?,
            "epsilon" => self.hp.epsilon = num(k, v)?,
            "b" => self.hp.b = num(k, v)?,
            "iterations" => self.hp.iterations = opt(k, v)?.unwrap_or(usize::MAX),
            "workers" => self.hp.workers = num(k, v)?,
            "seed" => self.hp.seed = num(k, v)?,
            "network" => {
                let preset = NetworkModel::preset(v).map_err(|e| bad(k, e.to_string()))?;
                self.network.bandwidth = preset.bandwidth;
                self.network.latency = preset.latency;
                self.network_name = v.to_string();
            }
            "bandwidth" => self.network.bandwidth = num(k, v)?,
            "latency" => self.network.latency = num(k, v)?,
            "queue_capacity" => self.network.queue_capacity = num(k, v)?,
            "workers_per_node" => self.network.workers_per_node = num(k, v)?,
            "mode" => {
                self.network.mode = match v {
                    "virtual" => ExecMode::Virtual,
                    "wall-clock" | "wallclock" => ExecMode::WallClock,
                    _ => return Err(bad(k, "expected virtual or wall-clock")),
                }
            }
            "torn_writes" => self.network.torn_writes = flag(k, v)?,
            "adaptive_b" => self.adaptive_b = flag(k, v)?,
            "q_opt" => self.q_opt = opt(k, v)?,
            "gamma" => self.gamma = opt(k, v)?,
            "b_min" => self.b_min = num(k, v)?,
            "b_max" => self.b_max = num(k, v)?,
            "controller_interval" => self.controller_interval = opt(k, v)?,
            "send_every" => self.send_every = opt(k, v)?,
            "folds" => self.folds = num(k, v)?,
            "out" => self.out = PathBuf::from(v),
            "target" => self.target = opt(k, v)?,
            "target_factor" => self.target_factor = num(k, v)?,
            "batch_epsilon" => self.batch_epsilon = opt(k, v)?,
            "batch_epochs" => self.batch_epochs = num(k, v)?,
            "samples" => self.samples = opt(k, v)?,
            "eval_points" => self.eval_points = num(k, v)?,
            "flop_time" => self.flop_time = num(k, v)?,
            "init" => {
                self.init = match v {
                    "sample" => InitStrategy::Sample,
                    "zeros" => InitStrategy::Zeros,
                    _ => return Err(bad(k, "expected sample or zeros")),
                }
            }
            "audit" => self.audit = flag(k, v)?,
            _ => return Err(bad(k, "unknown key")),
        }
        if let DataSource::Synthetic(spec) = &mut self.data {
            *spec = self.spec.clone();
        }
        Ok(())
    }

    /// Checks cross-field constraints, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let named = |key: &str, r: Result<()>| r.map_err(|e| bad(key, e.to_string()));
        if self.folds == 0 {
            return Err(bad("folds", "must be >= 1"));
        }
        named("hyperparameters", self.hp.validate())?;
        named("network", self.network.validate())?;
        match &self.data {
            DataSource::Synthetic(spec) => named("data", spec.validate())?,
            DataSource::File { points, truth } => {
                if !points.is_file() {
                    return Err(bad("data", format!("{} does not exist", points.display())));
                }
                if let Some(t) = truth.as_ref().filter(|t| !t.is_file()) {
                    return Err(bad("truth", format!("{} does not exist", t.display())));
                }
            }
        }
        if self.spec.k == 0 {
            return Err(bad("k", "must be >= 1"));
        }
        if self.hp.iterations == usize::MAX && self.samples.is_none() && self.solver != Solver::Batch {
            return Err(bad("iterations", "unbounded iterations need a `samples` budget"));
        }
        if self.solver == Solver::Batch && self.hp.iterations == usize::MAX {
            return Err(bad("iterations", "batch descent needs a finite epoch count"));
        }
        if !(self.target_factor > 0.0) {
            return Err(bad("target_factor", "must be > 0"));
        }
        if self.eval_points == 0 {
            return Err(bad("eval_points", "must be >= 1"));
        }
        if !(self.flop_time > 0.0) {
            return Err(bad("flop_time", "must be > 0"));
        }
        if self.samples == Some(0) {
            return Err(bad("samples", "must be >= 1"));
        }
        if self.send_every == Some(0) {
            return Err(bad("send_every", "must be >= 1"));
        }
        if self.adaptive_b {
            named("controller", self.controller().validate())?;
        }
        Ok(())
    }

    /// The controller this config describes (used only when `adaptive_b`).
    pub fn controller(&self) -> ControllerState {
        let mut cs = ControllerState::with_defaults(self.hp.b, self.network.queue_capacity);
        if let Some(q) = self.q_opt {
            cs.q_opt = q;
            cs.q1 = q;
            cs.q2 = q;
            cs.gamma = 0.1 * self.hp.b as f64 / q.max(1.0);
        }
        if let Some(g) = self.gamma {
            cs.gamma = g;
        }
        cs.b_min = self.b_min;
        cs.b_max = self.b_max;
        cs.b = self.hp.b.clamp(self.b_min.min(self.b_max), self.b_max);
        cs.interval = self.controller_interval;
        cs
    }

    pub fn batch_epsilon(&self) -> f64 {
        self.batch_epsilon.unwrap_or(0.3 * self.spec.k as f64)
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("solver", self.solver.name().into());
        let sp = &self.spec;
        put("n", sp.n.to_string());
        put("m", sp.m.to_string());
        put("k", sp.k.to_string());
        put("min_center_dist", sp.min_center_dist.to_string());
        put("cluster_sigma", sp.cluster_sigma.to_string());
        put("box_half_width", sp.box_half_width.to_string());
        put(
            "cluster_sigmas",
            sp.cluster_sigmas.as_ref().map_or_else(
                || "none".into(),
                |v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
        );
        put("data_seed", sp.seed.to_string());
        match &self.data {
            DataSource::Synthetic(_) => put("data", "synthetic".into()),
            DataSource::File { points, truth } => {
                put("data", points.display().to_string());
                put("truth", show(&truth.as_ref().map(|t| t.display())));
            }
        }
        put("epsilon", self.hp.epsilon.to_string());
        put("b", self.hp.b.to_string());
        put(
            "iterations",
            if self.hp.iterations == usize::MAX {
                "inf".into()
            } else {
                self.hp.iterations.to_string()
            },
        );
        put("workers", self.hp.workers.to_string());
        put("seed", self.hp.seed.to_string());
        let net = &self.network;
        put("network", self.network_name.clone());
        put("bandwidth", net.bandwidth.to_string());
        put("latency", net.latency.to_string());
        put("queue_capacity", net.queue_capacity.to_string());
        put("workers_per_node", net.workers_per_node.to_string());
        put("mode", net.mode.name().into());
        put("torn_writes", net.torn_writes.to_string());
        put("adaptive_b", self.adaptive_b.to_string());
        put("q_opt", show(&self.q_opt));
        put("gamma", show(&self.gamma));
        put("b_min", self.b_min.to_string());
        put("b_max", self.b_max.to_string());
        put("controller_interval", show(&self.controller_interval));
        put("send_every", show(&self.send_every));
        put("folds", self.folds.to_string());
        put("out", self.out.display().to_string());
        put("target", show(&self.target));
        put("target_factor", self.target_factor.to_string());
        put("batch_epsilon", show(&self.batch_epsilon));
        put("batch_epochs", self.batch_epochs.to_string());
        put("samples", show(&self.samples));
        put("eval_points", self.eval_points.to_string());
        put("flop_time", self.flop_time.to_string());
        put("init", self.init.name().into());
        put("audit", self.audit.to_string());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    B,
    Workers,
    Bandwidth,
}

impl SweepVar {
    pub fn key(self) -> &'static str {
        match self {
            SweepVar::B => "b",
            SweepVar::Workers => "workers",
            SweepVar::Bandwidth => "bandwidth",
        }
    }
}

impl FromStr for SweepVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b" => Ok(SweepVar::B),
            "workers" => Ok(SweepVar::Workers),
            "bandwidth" => Ok(SweepVar::Bandwidth),
            _ => Err(bad("sweep_var", "expected b, workers or bandwidth")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub var: SweepVar,
    pub values: Vec<f64>,
}

impl SweepConfig {
    /// Parses `sweep_var` and `sweep_values` (comma separated); every other key goes to the base.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut base = ExperimentConfig::default();
        let mut var = None;
        let mut values = None;
        for (_, k, v) in parse_pairs(text)? {
            match k.as_str() {
                "sweep_var" => var = Some(v.parse()?),
                "sweep_values" => values = Some(parse_values(&v)?),
                _ => base.set(&k, &v)?,
            }
        }
        let cfg = Self {
            base,
            var: var.ok_or_else(|| bad("sweep_var", "missing"))?,
            values: values.ok_or_else(|| bad("sweep_values", "missing"))?,
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(bad("sweep_values", "must not be empty"));
        }
        if let Some(v) = self.values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(bad("sweep_values", format!("{v} is not positive")));
        }
        if self.var != SweepVar::Bandwidth {
            if let Some(v) = self.values.iter().find(|v| v.fract() != 0.0) {
                return Err(bad("sweep_values", format!("{v} is not an integer")));
            }
        }
        self.base.validate()
    }

    /// The base config with the swept key set to `value`.
    pub fn at(&self, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        cfg.set(self.var.key(), &value.to_string())?;
        Ok(cfg)
    }
}

pub fn parse_values(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num("sweep_values", s.trim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = ExperimentConfig::from_text(
            "# header\nsolver = spsgd\nb = 20 # trailing\n\nnetwork = ethernet\nlatency = 1e-3\nb = 30\n",
        )
        .unwrap();
        assert_eq!(cfg.solver, Solver::SimuParallel);
        assert_eq!(cfg.hp.b, 30);
        assert_eq!(cfg.network.bandwidth, 1.25e8);
        assert_eq!(cfg.network.latency, 1e-3);
    }

    #[test]
    fn errors_name_the_key() {
        let err = ExperimentConfig::from_text("epsilon = fast").unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
        let err = ExperimentConfig::from_text("colour = blue").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = ExperimentConfig::from_text("just words").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let mut cfg = ExperimentConfig::default();
        cfg.folds = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("folds"));
        cfg.folds = 1;
        cfg.set("data", "/definitely/not/here.bin").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("data"));
    }

    #[test]
    fn manifest_round_trips() {
        let mut cfg = ExperimentConfig::from_text(
            "solver = asgd\nnetwork = ethernet\nadaptive_b = yes\nq_opt = 12\nsend_every = inf\nsamples = 4000\niterations = inf\ncluster_sigmas = 0.5,1,2\nk = 3\n",
        )
        .unwrap();
        cfg.set("queue-capacity", "7").unwrap();
        let text = cfg.to_manifest();
        let again = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_manifest(), text);
    }

    #[test]
    fn file_data_manifest_round_trips() {
        let cfg = ExperimentConfig::from_text("data = /tmp/x.bin\ntruth = /tmp/x.truth\n").unwrap();
        let again = ExperimentConfig::from_text(&cfg.to_manifest()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn controller_overrides() {
        let cfg = ExperimentConfig::from_text("b = 400\nqueue_capacity = 20\nadaptive_b = true\n").unwrap();
        let cs = cfg.controller();
        assert_eq!(cs.q_opt, 10.0);
        assert!((cs.gamma - 4.0).abs() < 1e-12);
        let cfg = ExperimentConfig::from_text("b = 400\nq_opt = 5\ngamma = 0.5\ncontroller_interval = none\n").unwrap();
        let cs = cfg.controller();
        assert_eq!((cs.q_opt, cs.gamma, cs.interval), (5.0, 0.5, None));
    }

    #[test]
    fn sweep_config() {
        let s = SweepConfig::from_text("sweep_var = b\nsweep_values = 10, 100,1000\nnetwork = ethernet\n").unwrap();
        assert_eq!(s.values, vec![10.0, 100.0, 1000.0]);
        assert_eq!(s.at(100.0).unwrap().hp.b, 100);
        assert!(s.validate().is_ok());
        let s = SweepConfig::from_text("sweep_var = b\nsweep_values = 1.5\n").unwrap();
        assert!(s.validate().is_err());
        assert!(SweepConfig::from_text("sweep_var = colour\nsweep_values = 1\n").is_err());
        assert!(SweepConfig::from_text("sweep_values = 1\n").is_err());
    }
}
