//! Asynchronous mini-batch SGD for K-Means with Parzen-window merging of
//! peer states, adaptive mini-batch sizes and an emulated one-sided network.

pub mod adaptive;
pub mod asgd;
pub mod config;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod sampling;
pub mod solvers;
pub mod trace;
pub mod transport;
pub mod wallclock;

pub use adaptive::{adapt, controller_tick, ControllerState};
pub use asgd::{merge_update, parzen_accept, run_asgd, worker_step, AsgdConfig, WorkerState};
pub use config::{DataSource, ExperimentConfig, Solver, SweepConfig, SweepVar};
pub use datagen::{generate, SyntheticSpec};
pub use error::{Error, Result};
pub use harness::{compare_presets, run_experiment, run_sweep, CompareReport, ExperimentReport, FoldReport, SweepReport};
pub use model::{
    deserialize_state, distance_sq, serialize_state, CostModel, Hyperparams, ModelState, UpdateMessage, UpdateVector,
    WorkerId,
};
pub use objective::{
    assign, ground_truth_error, minibatch_update, point_update, quantization_error, Dataset, GroundTruth,
};
pub use sampling::{initial_state, InitStrategy};
pub use solvers::{average, batch_gd, sgd_run, simuparallel_sgd};
pub use trace::{AuditReport, QueueSample, RunContext, RunStats, SolverResult, TracePoint};
pub use transport::{queue_size, ExecMode, NetworkModel, QueueMonitor, SendOutcome, SimTransport};
