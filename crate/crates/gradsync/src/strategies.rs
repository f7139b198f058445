//! The four data-parallel training strategies, all emitting the same
//! metrics schema and event logs:
//!
//! * `psgd`  — purely offline: every worker trains its shard, no
//!   communication (the throughput upper bound).
//! * `ssgd`  — per step, gradients are AllReduce-averaged and every worker
//!   applies the same update; replicas stay identical.
//! * `local` — Local SGD: workers train independently and AllReduce-average
//!   the model parameters every `gamma`-th step.
//! * `hpsgd` — hierarchical overlapped SGD: each worker hosts a training
//!   role (P_t) that never blocks on communication and a synchronization
//!   role (P_s) that AllReduces accumulated gradients in the background and
//!   commits each synchronized mean to the global model one round late.
//!
//! P_t's loop per step: compute the gradient at the replica if a block is
//! in progress (`counter > 0`), else at the global model; then branch on
//! the current status. While `synchronizing`, the first step of a block
//! clones the replica from the (freshly committed) global model and
//! snapshots the block start; the gradient updates the replica and joins
//! the accumulator. When `idling` is observed, the accumulated gradients
//! (including this step's) are handed to P_s, the status flips to
//! `synchronizing`, and P_s wakes: it first commits the mean synchronized
//! in the previous round, then AllReduces the handoff. Training never
//! stops while synchronization is in flight.

use crate::comms::{CommError, CommGroup, Communicator, LatencyModel};
use crate::data::{batches, shard, DataError, Dataset};
use crate::model::{compute_gradient, evaluate, init_params, Batch, ModelError, ModelSpec};
use crate::simclock::{ActorHandle, ClockMode, PhaseEvent, PhaseKind, Role, SimClock};
use crate::tensor::{GradVector, ParamVector, Rng, TensorError};
use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("numeric divergence at worker {worker} step {step}: {source}")]
    Diverged {
        worker: usize,
        step: u64,
        source: ModelError,
    },
    #[error("parameter update overflowed at worker {worker} step {step}")]
    UpdateOverflow { worker: usize, step: u64 },
    #[error("communication failure at worker {worker}: {source}")]
    Comm { worker: usize, source: CommError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("worker {worker} panicked")]
    WorkerPanicked { worker: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Psgd,
    Ssgd,
    LocalSgd,
    Hpsgd,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Psgd => "psgd",
            Strategy::Ssgd => "ssgd",
            Strategy::LocalSgd => "local",
            Strategy::Hpsgd => "hpsgd",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "psgd" => Some(Strategy::Psgd),
            "ssgd" => Some(Strategy::Ssgd),
            "local" | "local_sgd" | "localsgd" => Some(Strategy::LocalSgd),
            "hpsgd" => Some(Strategy::Hpsgd),
            _ => None,
        }
    }

    pub fn all() -> [Strategy; 4] {
        [
            Strategy::Psgd,
            Strategy::Ssgd,
            Strategy::LocalSgd,
            Strategy::Hpsgd,
        ]
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Virtual-time cost model: every local step costs `t_train_ns` (scaled by
/// the worker's multiplier), every collective costs the latency model's
/// delay.
#[derive(Clone, Debug)]
pub struct TimingConfig {
    pub t_train_ns: u64,
    /// Per-worker speed multipliers on t_train (empty = homogeneous).
    pub multipliers: Vec<f64>,
    pub latency: LatencyModel,
}

impl TimingConfig {
    pub fn uniform(t_train_ns: u64, latency: LatencyModel) -> Self {
        Self {
            t_train_ns,
            multipliers: Vec::new(),
            latency,
        }
    }

    pub fn step_cost_ns(&self, worker: usize) -> u64 {
        let m = self.multipliers.get(worker).copied().unwrap_or(1.0);
        (self.t_train_ns as f64 * m).round() as u64
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub n: usize,
    pub mu: f64,
    pub steps: u64,
    pub gamma: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub timing: TimingConfig,
    pub model: ModelSpec,
    pub clock_mode: ClockMode,
    /// Barrier-align every HPSGD training step (used for convergence
    /// comparisons; off by default so the overlap timing is undisturbed).
    pub lockstep: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.n < 1 {
            return Err(StrategyError::InvalidConfig("n must be >= 1".into()));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(StrategyError::InvalidConfig(
                "mu must be finite and >= 0".into(),
            ));
        }
        if self.steps < 1 {
            return Err(StrategyError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.gamma < 1 {
            return Err(StrategyError::InvalidConfig("gamma must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(StrategyError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One reporting row: written at step 0 and at every epoch boundary
/// (one pass over the rank-0 shard).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub strategy: Strategy,
    pub n: usize,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub time_ns: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub sync_count: u64,
    pub compute_ns: u64,
    pub sync_ns: u64,
    pub wait_ns: u64,
    pub hidden_sync_ns: u64,
}

pub struct RunOutput {
    /// Final parameters, one per worker. SSGD and HPSGD keep them
    /// identical across workers; PSGD and Local SGD may not.
    pub params: Vec<ParamVector>,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<PhaseEvent>,
}

const SALT_SHARD: u64 = 0x5348_4152;
const SALT_INIT: u64 = 0x494e_4954;
const SALT_EPOCH: u64 = 0x4550_4f43;

fn epoch_shuffle_seed(seed: u64, worker: usize, epoch: u64) -> u64 {
    Rng::derive(
        seed ^ SALT_EPOCH,
        (worker as u64 + 1).wrapping_mul(0x9E37_79B9).wrapping_add(epoch),
    )
    .next_u64()
}

/// Endless mini-batch source for one worker: reshuffles its shard every
/// pass with a per-(seed, worker, epoch) stream.
struct BatchFeed<'a> {
    dataset: &'a Dataset,
    shard: crate::data::Shard,
    batch_size: usize,
    seed: u64,
    worker: usize,
    epochs_drawn: u64,
    queue: VecDeque<Batch>,
}

impl<'a> BatchFeed<'a> {
    fn new(
        dataset: &'a Dataset,
        n: usize,
        worker: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        let mut rng = Rng::derive(seed, SALT_SHARD);
        let shard = shard(dataset, n, worker, &mut rng)?;
        Ok(Self {
            dataset,
            shard,
            batch_size,
            seed,
            worker,
            epochs_drawn: 0,
            queue: VecDeque::new(),
        })
    }

    fn steps_per_epoch(&self) -> u64 {
        self.shard.len().div_ceil(self.batch_size) as u64
    }

    fn next_batch(&mut self) -> Result<Batch, DataError> {
        if self.queue.is_empty() {
            let bs = batches(
                self.dataset,
                &self.shard,
                self.batch_size,
                epoch_shuffle_seed(self.seed, self.worker, self.epochs_drawn),
            )?;
            self.epochs_drawn += 1;
            self.queue = bs.into();
        }
        Ok(self.queue.pop_front().expect("refilled"))
    }
}

/// Running phase totals a role accumulates about itself.
#[derive(Clone, Copy, Default)]
struct PhaseCounters {
    compute_ns: u64,
    sync_ns: u64,
    wait_ns: u64,
}

/// Rank-0 epoch reporting: evaluates on the held-out split and snapshots
/// cumulative counters.
struct EpochReporter<'a> {
    strategy: Strategy,
    n: usize,
    seed: u64,
    spec: ModelSpec,
    test: &'a Batch,
    steps_per_epoch: u64,
    epoch: u64,
    losses: Vec<f64>,
    records: Vec<MetricsRecord>,
}

impl<'a> EpochReporter<'a> {
    fn new(
        strategy: Strategy,
        cfg: &TrainConfig,
        test: &'a Batch,
        steps_per_epoch: u64,
    ) -> Self {
        Self {
            strategy,
            n: cfg.n,
            seed: cfg.seed,
            spec: cfg.model,
            test,
            steps_per_epoch,
            epoch: 0,
            losses: Vec::new(),
            records: Vec::new(),
        }
    }

    fn record(
        &mut self,
        params: &ParamVector,
        step: u64,
        time_ns: u64,
        counters: PhaseCounters,
        sync_count: u64,
        hidden_sync_ns: u64,
    ) -> Result<(), ModelError> {
        let (acc, test_loss) = evaluate(&self.spec, params, self.test)?;
        // Before any step the train loss column carries the held-out loss.
        let train_loss = if self.losses.is_empty() {
            test_loss
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        };
        self.losses.clear();
        self.records.push(MetricsRecord {
            strategy: self.strategy,
            n: self.n,
            seed: self.seed,
            epoch: self.epoch,
            step,
            time_ns,
            train_loss,
            test_accuracy: acc,
            sync_count,
            compute_ns: counters.compute_ns,
            sync_ns: counters.sync_ns,
            wait_ns: counters.wait_ns,
            hidden_sync_ns,
        });
        self.epoch += 1;
        Ok(())
    }

    fn on_step_loss(&mut self, loss: f64) {
        self.losses.push(loss);
    }

    fn is_boundary(&self, steps_done: u64) -> bool {
        steps_done % self.steps_per_epoch == 0
    }
}

/// Disarms on success; on error or panic it shuts the clock down and
/// poisons the groups so no sibling role blocks forever.
struct AbortGuard<'a> {
    clock: &'a SimClock,
    groups: &'a [Arc<CommGroup>],
    armed: bool,
}

impl Drop for AbortGuard<'_> {
    fn drop(&mut self) {
        if self.armed {
            self.clock.request_shutdown();
            for g in self.groups {
                g.abort(CommError::Shutdown);
            }
        }
    }
}

fn guarded<T>(
    clock: &SimClock,
    groups: &[Arc<CommGroup>],
    f: impl FnOnce() -> Result<T, StrategyError>,
) -> Result<T, StrategyError> {
    let mut guard = AbortGuard {
        clock,
        groups,
        armed: true,
    };
    let out = f();
    if out.is_ok() {
        guard.armed = false;
    }
    out
}

fn apply_update(
    params: &mut ParamVector,
    grad: &[f64],
    mu: f64,
    worker: usize,
    step: u64,
) -> Result<(), StrategyError> {
    crate::tensor::axpy_in_place(-mu, grad, params.as_mut_slice()).map_err(|e| match e {
        TensorError::NonFinite { .. } => StrategyError::UpdateOverflow { worker, step },
        other => StrategyError::InvalidConfig(other.to_string()),
    })
}

fn comm_err(worker: usize) -> impl Fn(CommError) -> StrategyError {
    move |source| StrategyError::Comm { worker, source }
}

fn is_shutdown_error(e: &StrategyError) -> bool {
    matches!(
        e,
        StrategyError::Comm {
            source: CommError::Shutdown,
            ..
        }
    )
}

/// Keeps the most informative error: a root cause beats the Shutdown
/// errors the abort guard fans out to sibling roles.
fn merge_error(slot: &mut Option<StrategyError>, e: StrategyError) {
    match slot {
        None => *slot = Some(e),
        Some(cur) if is_shutdown_error(cur) && !is_shutdown_error(&e) => *slot = Some(e),
        _ => {}
    }
}

fn grad_err(worker: usize, step: u64) -> impl Fn(ModelError) -> StrategyError {
    move |source| StrategyError::Diverged {
        worker,
        step,
        source,
    }
}

/// Runs the selected strategy against a train/test split.
pub fn run_strategy(
    strategy: Strategy,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput, StrategyError> {
    match strategy {
        Strategy::Psgd => run_psgd(cfg, train, test),
        Strategy::Ssgd => run_ssgd(cfg, train, test),
        Strategy::LocalSgd => run_local_sgd(cfg, train, test),
        Strategy::Hpsgd => run_hpsgd(cfg, train, test),
    }
}

struct WorkerResult {
    params: ParamVector,
    metrics: Vec<MetricsRecord>,
}

/// Shared scaffolding for the three single-role strategies. `per_step`
/// sees (worker, step, communicator, params, gradient) after the gradient
/// is computed and returns the counters consumed by the collective, if any.
fn run_single_role<F>(
    strategy: Strategy,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    per_step: F,
) -> Result<RunOutput, StrategyError>
where
    F: Fn(
            usize,
            u64,
            &mut Communicator,
            &mut ParamVector,
            &mut GradVector,
        ) -> Result<PhaseCounters, StrategyError>
        + Sync,
{
    cfg.validate()?;
    let clock = SimClock::new(cfg.clock_mode);
    let group = CommGroup::new(cfg.n);
    let handles: Vec<ActorHandle> = (0..cfg.n).map(|w| clock.register(w, Role::Train)).collect();
    let init = init_params(&cfg.model, &mut Rng::derive(cfg.seed, SALT_INIT))?;
    let test_batch = test.as_batch();
    let per_step = &per_step;

    let mut results: Vec<Option<WorkerResult>> = (0..cfg.n).map(|_| None).collect();
    let mut first_err: Option<StrategyError> = None;
    std::thread::scope(|s| {
        let mut joins = Vec::new();
        for (w, handle) in handles.into_iter().enumerate() {
            let clock = clock.clone();
            let group = group.clone();
            let init = init.clone();
            let test_batch = &test_batch;
            joins.push(s.spawn(move || {
                let groups = [group.clone()];
                guarded(&clock, &groups, move || {
                    let mut feed = BatchFeed::new(train, cfg.n, w, cfg.batch_size, cfg.seed)?;
                    let mut comm = Communicator::in_process(
                        group,
                        w,
                        cfg.timing.latency.clone(),
                        handle.clone(),
                    );
                    let mut params = init;
                    let mut counters = PhaseCounters::default();
                    let mut reporter = (w == 0).then(|| {
                        EpochReporter::new(strategy, cfg, test_batch, feed.steps_per_epoch())
                    });
                    if let Some(rep) = reporter.as_mut() {
                        handle.instant(|| {
                            rep.record(&params, 0, handle.now(), counters, 0, 0)
                        })?;
                    }
                    let cost = cfg.timing.step_cost_ns(w);
                    for step in 0..cfg.steps {
                        let batch = feed.next_batch()?;
                        let t0 = handle.now();
                        let (mut grad, loss) = handle
                            .work(PhaseKind::Compute, step, cost, || {
                                compute_gradient(&cfg.model, &params, &batch)
                            })
                            .map_err(grad_err(w, step))?;
                        counters.compute_ns += handle.now() - t0;
                        let step_counters =
                            per_step(w, step, &mut comm, &mut params, &mut grad)?;
                        counters.sync_ns += step_counters.sync_ns;
                        counters.wait_ns += step_counters.wait_ns;
                        if let Some(rep) = reporter.as_mut() {
                            rep.on_step_loss(loss);
                            if rep.is_boundary(step + 1) || step + 1 == cfg.steps {
                                handle.instant(|| {
                                    rep.record(
                                        &params,
                                        step + 1,
                                        handle.now(),
                                        counters,
                                        comm.rounds(),
                                        0,
                                    )
                                })?;
                            }
                        }
                    }
                    handle.finish();
                    Ok(WorkerResult {
                        params,
                        metrics: reporter.map(|r| r.records).unwrap_or_default(),
                    })
                })
            }));
        }
        for (w, j) in joins.into_iter().enumerate() {
            match j.join() {
                Ok(Ok(res)) => results[w] = Some(res),
                Ok(Err(e)) => merge_error(&mut first_err, e),
                Err(_) => merge_error(&mut first_err, StrategyError::WorkerPanicked { worker: w }),
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    let mut params = Vec::with_capacity(cfg.n);
    let mut metrics = Vec::new();
    for r in results.into_iter().flatten() {
        params.push(r.params);
        metrics.extend(r.metrics);
    }
    Ok(RunOutput {
        params,
        metrics,
        events: clock.take_events(),
    })
}

/// Purely offline training: the throughput reference, zero communication.
pub fn run_psgd(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput, StrategyError> {
    run_single_role(Strategy::Psgd, cfg, train, test, |w, step, _comm, params, grad| {
        apply_update(params, grad.as_slice(), cfg.mu, w, step)?;
        Ok(PhaseCounters::default())
    })
}

/// Synchronous SGD: AllReduce-average the per-step gradients; every worker
/// applies the identical mean update, so replicas agree after every step.
pub fn run_ssgd(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput, StrategyError> {
    run_single_role(Strategy::Ssgd, cfg, train, test, |w, step, comm, params, grad| {
        let report = comm
            .allreduce_average(grad.as_mut_slice())
            .map_err(comm_err(w))?;
        apply_update(params, grad.as_slice(), cfg.mu, w, step)?;
        Ok(PhaseCounters {
            compute_ns: 0,
            sync_ns: report.sync_ns,
            wait_ns: report.wait_ns,
        })
    })
}

/// Local SGD: independent steps with a model average every `gamma`-th step
/// (steps counted from 1).
pub fn run_local_sgd(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput, StrategyError> {
    run_single_role(Strategy::LocalSgd, cfg, train, test, |w, step, comm, params, grad| {
        apply_update(params, grad.as_slice(), cfg.mu, w, step)?;
        if (step + 1) % cfg.gamma == 0 {
            let report = comm
                .allreduce_average(params.as_mut_slice())
                .map_err(comm_err(w))?;
            Ok(PhaseCounters {
                compute_ns: 0,
                sync_ns: report.sync_ns,
                wait_ns: report.wait_ns,
            })
        } else {
            Ok(PhaseCounters::default())
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsStatus {
    Synchronizing,
    Idling,
}

/// The per-worker cell shared by P_t and P_s.
pub struct SharedWorkerState {
    pub status: PsStatus,
    /// The committed global model (this worker's copy of W).
    pub global: ParamVector,
    /// The block-local replica P_t trains on while P_s synchronizes.
    pub replica: Option<ParamVector>,
    /// Snapshot of W at the running block's first step (the commit base;
    /// equal to `global` because commits only land on block boundaries).
    pub block_start: Option<ParamVector>,
    /// Accumulated gradients of the running block.
    pub acc: GradVector,
    /// Local trainings P_t performed in the running block.
    pub counter: u64,
    /// Gradients handed to P_s, awaiting AllReduce.
    pub handoff: Option<GradVector>,
    /// Mean gradients from the last completed AllReduce; committed at the
    /// start of the next activation (one synchronization delayed).
    pub pending_synced: Option<GradVector>,
    pub sync_count: u64,
    pub commit_count: u64,
    pub hidden_sync_ns: u64,
    pub train_done: bool,
}

type Cell = Arc<(Mutex<SharedWorkerState>, Condvar)>;

/// Drain-protocol flag prepended to the P_s payload: 1 while the worker is
/// still training, 0 afterwards. The round's mean flag hits 0 exactly when
/// every worker has finished, which terminates all P_s loops together.
const FLAG_ACTIVE: f64 = 1.0;
const FLAG_DRAINED: f64 = 0.0;

fn hpsgd_ps_activation(
    cell: &Cell,
    comm: &mut Communicator,
    handle: &ActorHandle,
    mu: f64,
    flag: f64,
    grads: GradVector,
    worker: usize,
) -> Result<f64, StrategyError> {
    // Commit the previous round's mean onto the block-start snapshot of the
    // running block (identical to the current W, since commits only land on
    // block boundaries), then reset the counter so the next training step
    // opens a fresh block.
    let committed_idx = handle.instant(|| -> Result<Option<u64>, StrategyError> {
        let mut st = cell.0.lock().unwrap();
        let idx = if let Some(p) = st.pending_synced.take() {
            let mut base = st.block_start.take().unwrap_or_else(|| st.global.clone());
            crate::tensor::axpy_in_place(-mu, p.as_slice(), base.as_mut_slice()).map_err(|_| {
                StrategyError::UpdateOverflow {
                    worker,
                    step: st.commit_count,
                }
            })?;
            st.global = base;
            st.commit_count += 1;
            Some(st.commit_count)
        } else {
            None
        };
        st.counter = 0;
        Ok(idx)
    })?;
    if let Some(idx) = committed_idx {
        handle.mark(PhaseKind::Commit, idx);
    }

    let mut payload = Vec::with_capacity(grads.len() + 1);
    payload.push(flag);
    payload.extend_from_slice(grads.as_slice());
    let report = comm
        .allreduce_average(&mut payload)
        .map_err(comm_err(worker))?;
    let flag_mean = payload[0];
    let synced = GradVector::from_vec(payload.split_off(1));

    handle.instant(|| {
        let mut st = cell.0.lock().unwrap();
        st.pending_synced = Some(synced);
        st.sync_count += 1;
        st.hidden_sync_ns += report.wait_ns + report.sync_ns;
        st.status = PsStatus::Idling;
    });
    if handle.mode() == ClockMode::Real {
        cell.1.notify_all();
    }
    Ok(flag_mean)
}

enum PsWake {
    Handoff(GradVector),
    Drain,
}

fn hpsgd_ps_wait(cell: &Cell, handle: &ActorHandle) -> Result<PsWake, StrategyError> {
    match handle.mode() {
        ClockMode::Virtual => loop {
            let decision = handle.instant(|| {
                let mut st = cell.0.lock().unwrap();
                if let Some(h) = st.handoff.take() {
                    Some(PsWake::Handoff(h))
                } else if st.train_done {
                    Some(PsWake::Drain)
                } else {
                    None
                }
            });
            if let Some(d) = decision {
                return Ok(d);
            }
            if !handle.park() {
                return Err(StrategyError::Comm {
                    worker: handle.worker(),
                    source: CommError::Shutdown,
                });
            }
        },
        ClockMode::Real => {
            let mut st = cell.0.lock().unwrap();
            loop {
                if let Some(h) = st.handoff.take() {
                    return Ok(PsWake::Handoff(h));
                }
                if st.train_done {
                    return Ok(PsWake::Drain);
                }
                st = cell.1.wait(st).unwrap();
            }
        }
    }
}

fn hpsgd_ps_role(
    cell: Cell,
    mut comm: Communicator,
    handle: ActorHandle,
    mu: f64,
    worker: usize,
) -> Result<(), StrategyError> {
    loop {
        match hpsgd_ps_wait(&cell, &handle)? {
            PsWake::Handoff(grads) => {
                hpsgd_ps_activation(&cell, &mut comm, &handle, mu, FLAG_ACTIVE, grads, worker)?;
            }
            PsWake::Drain => {
                let zero = GradVector::zeros(cell.0.lock().unwrap().acc.len());
                let flag_mean =
                    hpsgd_ps_activation(&cell, &mut comm, &handle, mu, FLAG_DRAINED, zero, worker)?;
                if flag_mean == 0.0 {
                    break;
                }
            }
        }
    }
    handle.finish();
    Ok(())
}

/// Hierarchical parallel SGD: per worker, P_t trains continuously while
/// P_s overlaps the gradient AllReduce and commits one round behind.
pub fn run_hpsgd(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput, StrategyError> {
    cfg.validate()?;
    let clock = SimClock::new(cfg.clock_mode);
    // Registration order fixes actor ids; scheduling order is by
    // (time, worker, role) regardless.
    let pt_handles: Vec<ActorHandle> = (0..cfg.n).map(|w| clock.register(w, Role::Train)).collect();
    let ps_handles: Vec<ActorHandle> = (0..cfg.n).map(|w| clock.register(w, Role::Sync)).collect();
    let group_s = CommGroup::new(cfg.n);
    let group_t = CommGroup::new(cfg.n);
    let init = init_params(&cfg.model, &mut Rng::derive(cfg.seed, SALT_INIT))?;
    let param_len = init.len();
    let test_batch = test.as_batch();

    let cells: Vec<Cell> = (0..cfg.n)
        .map(|_| {
            Arc::new((
                Mutex::new(SharedWorkerState {
                    status: PsStatus::Idling,
                    global: init.clone(),
                    replica: None,
                    block_start: None,
                    acc: GradVector::zeros(param_len),
                    counter: 0,
                    handoff: None,
                    pending_synced: None,
                    sync_count: 0,
                    commit_count: 0,
                    hidden_sync_ns: 0,
                    train_done: false,
                }),
                Condvar::new(),
            ))
        })
        .collect();

    let mut metrics_out: Vec<MetricsRecord> = Vec::new();
    let mut first_err: Option<StrategyError> = None;
    std::thread::scope(|s| {
        let mut pt_joins = Vec::new();
        let mut ps_joins = Vec::new();
        for w in 0..cfg.n {
            let cell = cells[w].clone();
            let handle = ps_handles[w].clone();
            let comm = Communicator::in_process(
                group_s.clone(),
                w,
                cfg.timing.latency.clone(),
                handle.clone(),
            );
            let clock = clock.clone();
            let groups = [group_s.clone(), group_t.clone()];
            ps_joins.push(s.spawn(move || {
                guarded(&clock, &groups, move || {
                    hpsgd_ps_role(cell, comm, handle, cfg.mu, w)
                })
            }));
        }
        for w in 0..cfg.n {
            let cell = cells[w].clone();
            let handle = pt_handles[w].clone();
            let ps_actor = ps_handles[w].actor_id();
            let group_t = group_t.clone();
            let clock = clock.clone();
            let groups = [group_s.clone(), group_t.clone()];
            let test_batch = &test_batch;
            pt_joins.push(s.spawn(move || {
                guarded(&clock, &groups, move || {
                    let mut feed = BatchFeed::new(train, cfg.n, w, cfg.batch_size, cfg.seed)?;
                    let mut comm_t = Communicator::in_process(
                        group_t,
                        w,
                        LatencyModel::zero(),
                        handle.clone(),
                    );
                    let mut counters = PhaseCounters::default();
                    let mut reporter = (w == 0).then(|| {
                        EpochReporter::new(Strategy::Hpsgd, cfg, test_batch, feed.steps_per_epoch())
                    });
                    if let Some(rep) = reporter.as_mut() {
                        let snapshot = handle.instant(|| cell.0.lock().unwrap().global.clone());
                        handle.instant(|| {
                            rep.record(&snapshot, 0, handle.now(), counters, 0, 0)
                        })?;
                    }
                    let cost = cfg.timing.step_cost_ns(w);
                    for step in 0..cfg.steps {
                        if cfg.lockstep {
                            let rep = comm_t.barrier().map_err(comm_err(w))?;
                            counters.wait_ns += rep.wait_ns;
                        }
                        let batch = feed.next_batch()?;
                        // Base model sampled at the step start: the replica
                        // while a block is in progress, else the global model.
                        let base = handle.instant(|| {
                            let st = cell.0.lock().unwrap();
                            if st.counter > 0 {
                                st.replica.clone().expect("counter > 0 implies replica")
                            } else {
                                st.global.clone()
                            }
                        });
                        let t0 = handle.now();
                        let (grad, loss) = handle
                            .work(PhaseKind::Compute, step, cost, || {
                                compute_gradient(&cfg.model, &base, &batch)
                            })
                            .map_err(grad_err(w, step))?;
                        counters.compute_ns += handle.now() - t0;
                        // Branch on the status observed now that the step is
                        // done (training ran while P_s possibly finished).
                        let handed = handle.instant(|| -> Result<bool, StrategyError> {
                            let mut st = cell.0.lock().unwrap();
                            crate::tensor::accumulate_in_place(&mut st.acc, &grad)
                                .map_err(|_| StrategyError::UpdateOverflow { worker: w, step })?;
                            match st.status {
                                PsStatus::Synchronizing => {
                                    if st.counter == 0 {
                                        st.block_start = Some(st.global.clone());
                                        st.replica = Some(st.global.clone());
                                    }
                                    let mut replica =
                                        st.replica.take().expect("replica exists in a block");
                                    crate::tensor::axpy_in_place(
                                        -cfg.mu,
                                        grad.as_slice(),
                                        replica.as_mut_slice(),
                                    )
                                    .map_err(|_| StrategyError::UpdateOverflow {
                                        worker: w,
                                        step,
                                    })?;
                                    st.replica = Some(replica);
                                    st.counter += 1;
                                    Ok(false)
                                }
                                PsStatus::Idling => {
                                    let handoff = st.acc.clone();
                                    st.acc.zero_out();
                                    st.handoff = Some(handoff);
                                    st.status = PsStatus::Synchronizing;
                                    Ok(true)
                                }
                            }
                        })?;
                        if handed {
                            if handle.mode() == ClockMode::Real {
                                cell.1.notify_all();
                            } else {
                                handle.unpark(ps_actor, handle.now());
                                handle.yield_now();
                            }
                        }
                        if let Some(rep) = reporter.as_mut() {
                            rep.on_step_loss(loss);
                            if rep.is_boundary(step + 1) || step + 1 == cfg.steps {
                                let (snapshot, sync_count, hidden) = handle.instant(|| {
                                    let st = cell.0.lock().unwrap();
                                    (st.global.clone(), st.sync_count, st.hidden_sync_ns)
                                });
                                handle.instant(|| {
                                    rep.record(
                                        &snapshot,
                                        step + 1,
                                        handle.now(),
                                        counters,
                                        sync_count,
                                        hidden,
                                    )
                                })?;
                            }
                        }
                    }
                    handle.instant(|| {
                        cell.0.lock().unwrap().train_done = true;
                    });
                    if handle.mode() == ClockMode::Real {
                        cell.1.notify_all();
                    } else {
                        handle.unpark(ps_actor, handle.now());
                    }
                    handle.finish();
                    Ok(reporter.map(|r| r.records).unwrap_or_default())
                })
            }));
        }

        for (w, j) in pt_joins.into_iter().enumerate() {
            match j.join() {
                Ok(Ok(records)) => metrics_out.extend(records),
                Ok(Err(e)) => merge_error(&mut first_err, e),
                Err(_) => merge_error(&mut first_err, StrategyError::WorkerPanicked { worker: w }),
            }
        }
        for (w, j) in ps_joins.into_iter().enumerate() {
            match j.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => merge_error(&mut first_err, e),
                Err(_) => merge_error(&mut first_err, StrategyError::WorkerPanicked { worker: w }),
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }

    let params: Vec<ParamVector> = cells
        .iter()
        .map(|c| c.0.lock().unwrap().global.clone())
        .collect();
    Ok(RunOutput {
        params,
        metrics: metrics_out,
        events: clock.take_events(),
    })
}
