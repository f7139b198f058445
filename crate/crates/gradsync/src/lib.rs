//! gradsync: a data-parallel SGD strategy lab.
//!
//! Implements and compares four gradient-synchronization strategies —
//! synchronous SGD, purely-offline parallel SGD, Local SGD with periodic
//! model averaging, and hierarchical overlapped SGD with two roles per
//! worker — over a deterministic virtual clock or the real one, with ring
//! AllReduce collectives and an experiment harness that writes metrics,
//! event logs and derived summaries as CSV.

pub mod comms;
pub mod data;
pub mod harness;
pub mod model;
pub mod simclock;
pub mod strategies;
pub mod tensor;

pub use comms::{CommError, CommGroup, Communicator, LatencyModel};
pub use data::{load_csv, make_blobs, save_csv, Dataset, Shard};
pub use model::{Batch, ModelKind, ModelSpec};
pub use simclock::{breakdown, ClockMode, PhaseEvent, PhaseKind, Role, SimClock};
pub use strategies::{
    run_hpsgd, run_local_sgd, run_psgd, run_ssgd, run_strategy, MetricsRecord, RunOutput,
    SharedWorkerState, Strategy, TimingConfig, TrainConfig,
};
pub use tensor::{GradVector, ParamVector, Rng};
