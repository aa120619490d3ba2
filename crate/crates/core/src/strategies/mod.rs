//! The five aggregation protocols, written as steppable worker state machines.
//!
//! Every worker invocation starts by loading its [`WorkerState`] from the
//! checkpoint store and ends by saving it back, so nothing survives in memory
//! between rounds. Actors are driven either by a single-threaded round-robin
//! scheduler or by one OS thread per actor; both produce the same parameters
//! and payload counters because every aggregation sums in ascending worker
//! order and simulated time only depends on stamped availability times.

mod actor;
mod allreduce;
mod chunk;
mod link;
mod mlless;
mod scatter;
mod scheduler;
mod sharedstore;
mod spirt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use chunk::{chunk_concat, chunk_split, ChunkAssignment};
pub use scheduler::SchedulerMode;

use crate::error::{Error, Result};
use crate::sgd::{Dims, GradientVector, Minibatch, ModelParams};
use crate::substrate::{
    KvStore, LatencyModel, QueueMessage, Stamped, SubstrateClass, TrafficCounters, WorkerId,
    World,
};

/// Guard added to the parameter norm in [`significance_test`].
pub const SIGNIFICANCE_EPS: f64 = 1e-12;

pub const DEFAULT_POLL_BUDGET: u64 = 10_000;

/// Serialized by its [`StrategyKind::key`]; parsing also accepts labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    SpirtP2P,
    MLLessPS,
    ScatterReduce,
    AllReduce,
    SharedStoreBaseline,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::SpirtP2P,
        StrategyKind::MLLessPS,
        StrategyKind::ScatterReduce,
        StrategyKind::AllReduce,
        StrategyKind::SharedStoreBaseline,
    ];

    /// Short lowercase name used in config files and on the command line.
    pub fn key(&self) -> &'static str {
        match self {
            StrategyKind::SpirtP2P => "spirt",
            StrategyKind::MLLessPS => "mlless",
            StrategyKind::ScatterReduce => "scatterreduce",
            StrategyKind::AllReduce => "allreduce",
            StrategyKind::SharedStoreBaseline => "sharedstore",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::SpirtP2P => "SPIRT",
            StrategyKind::MLLessPS => "MLLess",
            StrategyKind::ScatterReduce => "ScatterReduce",
            StrategyKind::AllReduce => "AllReduce",
            StrategyKind::SharedStoreBaseline => "SharedStore",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "spirt" | "spirtp2p" => Ok(StrategyKind::SpirtP2P),
            "mlless" | "mllessps" => Ok(StrategyKind::MLLessPS),
            "scatterreduce" => Ok(StrategyKind::ScatterReduce),
            "allreduce" => Ok(StrategyKind::AllReduce),
            "sharedstore" | "sharedstorebaseline" | "gpu" => Ok(StrategyKind::SharedStoreBaseline),
            _ => Err(Error::config(format!("unknown strategy '{s}'"))),
        }
    }
}

impl Serialize for StrategyKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.key())
    }
}

impl<'de> Deserialize<'de> for StrategyKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|e| match e {
            Error::Config(msg) => serde::de::Error::custom(msg),
            other => serde::de::Error::custom(other),
        })
    }
}

/// Linear compute-time proxy: seconds = examples × parameters / rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    /// Example-parameter products processed per simulated second.
    pub rate: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel { rate: 2.0e8 }
    }
}

impl ComputeModel {
    pub fn gradient_seconds(&self, batch_size: usize, dims: Dims) -> f64 {
        (batch_size * dims.param_len()) as f64 / self.rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub kind: StrategyKind,
    pub workers: usize,
    pub lr: f64,
    /// MLLess significance threshold; `f64::INFINITY` filters everything.
    pub tau: f64,
    pub poll_budget: u64,
    pub latency: LatencyModel,
    pub compute: ComputeModel,
}

impl ProtocolConfig {
    pub fn new(kind: StrategyKind, workers: usize, lr: f64) -> Self {
        ProtocolConfig {
            kind,
            workers,
            lr,
            tau: 0.0,
            poll_budget: DEFAULT_POLL_BUDGET,
            latency: LatencyModel::default(),
            compute: ComputeModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive and finite"));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::config("tau must be >= 0"));
        }
        if self.poll_budget == 0 {
            return Err(Error::config("poll_budget must be >= 1"));
        }
        if !(self.compute.rate > 0.0) {
            return Err(Error::config("compute rate must be > 0"));
        }
        self.latency.validate()
    }
}

/// Everything a worker carries between invocations. Persisted to the
/// checkpoint store at the end of each round and reloaded at the start of
/// the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub worker_id: WorkerId,
    pub params: ModelParams,
    /// Rounds completed so far.
    pub round: u64,
    /// MLLess: accumulated updates not yet propagated to peers.
    pub residual: Option<GradientVector>,
    /// MLLess: messages that arrived ahead of their round.
    pub stash: Vec<StashedMessage>,
    /// Simulated time at which the worker's next invocation starts.
    pub clock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StashedMessage {
    pub message: QueueMessage,
    pub ready_at: f64,
}

impl From<Stamped<QueueMessage>> for StashedMessage {
    fn from(s: Stamped<QueueMessage>) -> Self {
        StashedMessage {
            message: s.value,
            ready_at: s.ready_at,
        }
    }
}

impl WorkerState {
    pub fn new(worker_id: WorkerId, params: ModelParams) -> Self {
        WorkerState {
            worker_id,
            params,
            round: 0,
            residual: None,
            stash: Vec::new(),
            clock: 0.0,
        }
    }

    pub fn checkpoint_key(worker: WorkerId) -> String {
        format!("worker/{worker}")
    }

    pub fn save(&self, world: &World) {
        let bytes = serde_json::to_vec(self).expect("worker state serializes");
        world.checkpoint.save(&Self::checkpoint_key(self.worker_id), bytes);
    }

    pub fn load(world: &World, worker: WorkerId) -> Result<WorkerState> {
        let bytes = world.checkpoint.load(&Self::checkpoint_key(worker))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::contract(format!("corrupt checkpoint for worker {worker}: {e}")))
    }
}

/// Persists an initial state for every worker, all starting from `params`.
pub fn seed_workers(world: &World, params: &ModelParams) {
    for w in 0..world.workers() {
        WorkerState::new(w, params.clone()).save(world);
    }
}

pub fn load_workers(world: &World) -> Result<Vec<WorkerState>> {
    (0..world.workers())
        .map(|w| WorkerState::load(world, w))
        .collect()
}

/// One worker's view of a finished round.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRoundRecord {
    pub worker: WorkerId,
    pub round: u64,
    pub aggregate: GradientVector,
    pub params: ModelParams,
    pub duration_s: f64,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub sync_wait_s: f64,
    pub traffic: TrafficCounters,
    /// MLLess: whether this worker's update was propagated.
    pub announced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u64,
    pub aggregates: Vec<GradientVector>,
    pub params: Vec<ModelParams>,
    pub durations_s: Vec<f64>,
    pub compute_s: Vec<f64>,
    pub transfer_s: Vec<f64>,
    pub sync_wait_s: Vec<f64>,
    pub announced: Vec<bool>,
    /// Operations issued by each worker during this round.
    pub worker_traffic: Vec<TrafficCounters>,
    /// Sum of every actor's operations attributed to this round, supervisor included.
    pub traffic: TrafficCounters,
}

impl RoundOutcome {
    /// True when every worker holds bitwise-identical parameters.
    pub fn workers_agree(&self) -> bool {
        let bits = |p: &ModelParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let first = bits(&self.params[0]);
        self.params.iter().all(|p| bits(p) == first)
    }

    pub fn total_sync_wait(&self) -> f64 {
        self.sync_wait_s.iter().sum()
    }
}

/// Minibatches for one epoch: `rounds[k][w]` holds worker `w`'s batches for
/// its `k`-th round (one batch, or `m` for SPIRT).
#[derive(Debug, Clone)]
pub struct EpochPlan<'a> {
    pub first_round: u64,
    pub rounds: Vec<Vec<&'a [Minibatch]>>,
}

impl<'a> EpochPlan<'a> {
    pub fn validate(&self, workers: usize) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(Error::config("epoch plan has no rounds"));
        }
        for r in &self.rounds {
            if r.len() != workers {
                return Err(Error::config("epoch plan must list batches for every worker"));
            }
            if r.iter().any(|b| b.is_empty()) {
                return Err(Error::config("every worker needs at least one minibatch per round"));
            }
        }
        Ok(())
    }
}

/// `‖update‖₂ / (‖params‖₂ + ε) > tau`.
pub fn significance_test(update: &GradientVector, params: &ModelParams, tau: f64) -> bool {
    debug_assert_eq!(update.dims, params.dims);
    update.l2_norm() / (params.l2_norm() + SIGNIFICANCE_EPS) > tau
}

/// Simulated time a poller spends at a barrier it reached at `since` when the
/// last member arrived at `completion`: whole poll ticks, at least one.
/// With a zero tick the wait is just the gap.
pub fn simulated_barrier_wait(since: f64, completion: f64, tick: f64) -> f64 {
    let gap = (completion - since).max(0.0);
    if tick > 0.0 {
        (gap / tick).ceil().max(1.0) * tick
    } else {
        gap
    }
}

/// Blocks until `workers` distinct members have registered at
/// `(barrier, round)`, polling at most `poll_budget` times. Returns the
/// simulated wait for a caller that registered at `since`.
#[allow(clippy::too_many_arguments)]
pub fn barrier_wait(
    store: &KvStore,
    kind: StrategyKind,
    barrier: &str,
    round: u64,
    worker: WorkerId,
    workers: usize,
    poll_budget: u64,
    since: f64,
    tick: f64,
    hub: &crate::substrate::Hub,
) -> Result<f64> {
    if workers <= 1 {
        return Ok(0.0);
    }
    let mut polls = 0;
    loop {
        let seen = hub.version();
        let status = store.barrier_status(barrier, round);
        polls += 1;
        if status.count() >= workers {
            let last = status.latest_arrival().unwrap_or(since);
            return Ok(simulated_barrier_wait(since, last, tick));
        }
        if polls >= poll_budget {
            return Err(Error::Protocol {
                strategy: kind,
                round,
                actor: format!("worker {worker}"),
                detail: format!(
                    "barrier '{barrier}' poll budget exhausted; missing workers {:?}",
                    status.missing(workers)
                ),
            });
        }
        hub.wait_for_change(seen, std::time::Duration::from_millis(1));
    }
}

/// Runs a full epoch of `cfg.kind` rounds over `world`. Worker states must
/// already be seeded in the checkpoint store.
pub fn run_rounds(
    cfg: &ProtocolConfig,
    world: &World,
    plan: &EpochPlan<'_>,
    mode: SchedulerMode,
) -> Result<Vec<RoundOutcome>> {
    cfg.validate()?;
    if world.workers() != cfg.workers {
        return Err(Error::config(format!(
            "world has {} workers but the protocol expects {}",
            world.workers(),
            cfg.workers
        )));
    }
    plan.validate(cfg.workers)?;
    if cfg.kind == StrategyKind::ScatterReduce {
        let dims = plan.rounds[0][0][0].dims;
        ChunkAssignment::new(dims.param_len(), cfg.workers)?;
    }
    let records = scheduler::run(cfg, world, plan, mode)?;
    Ok(assemble(cfg, plan, records))
}

/// Runs a single round where worker `w` trains on `batches[w]`.
pub fn run_round(
    cfg: &ProtocolConfig,
    world: &World,
    round: u64,
    batches: &[&[Minibatch]],
    mode: SchedulerMode,
) -> Result<RoundOutcome> {
    let plan = EpochPlan {
        first_round: round,
        rounds: vec![batches.to_vec()],
    };
    let mut out = run_rounds(cfg, world, &plan, mode)?;
    Ok(out.remove(0))
}

fn with_kind(cfg: &ProtocolConfig, kind: StrategyKind) -> ProtocolConfig {
    ProtocolConfig {
        kind,
        ..cfg.clone()
    }
}

pub fn run_allreduce_round(
    cfg: &ProtocolConfig,
    world: &World,
    round: u64,
    batches: &[&[Minibatch]],
    mode: SchedulerMode,
) -> Result<RoundOutcome> {
    run_round(&with_kind(cfg, StrategyKind::AllReduce), world, round, batches, mode)
}

pub fn run_scatterreduce_round(
    cfg: &ProtocolConfig,
    world: &World,
    round: u64,
    batches: &[&[Minibatch]],
    mode: SchedulerMode,
) -> Result<RoundOutcome> {
    run_round(&with_kind(cfg, StrategyKind::ScatterReduce), world, round, batches, mode)
}

pub fn run_spirt_round(
    cfg: &ProtocolConfig,
    world: &World,
    round: u64,
    batches: &[&[Minibatch]],
    mode: SchedulerMode,
) -> Result<RoundOutcome> {
    run_round(&with_kind(cfg, StrategyKind::SpirtP2P), world, round, batches, mode)
}

pub fn run_mlless_round(
    cfg: &ProtocolConfig,
    world: &World,
    round: u64,
    batches: &[&[Minibatch]],
    mode: SchedulerMode,
) -> Result<RoundOutcome> {
    run_round(&with_kind(cfg, StrategyKind::MLLessPS), world, round, batches, mode)
}

pub fn run_sharedstore_round(
    cfg: &ProtocolConfig,
    world: &World,
    round: u64,
    batches: &[&[Minibatch]],
    mode: SchedulerMode,
) -> Result<RoundOutcome> {
    run_round(
        &with_kind(cfg, StrategyKind::SharedStoreBaseline),
        world,
        round,
        batches,
        mode,
    )
}

fn assemble(
    cfg: &ProtocolConfig,
    plan: &EpochPlan<'_>,
    records: scheduler::EpochRecords,
) -> Vec<RoundOutcome> {
    let mut by_round: Vec<Vec<WorkerRoundRecord>> = vec![Vec::new(); plan.rounds.len()];
    for rec in records.workers {
        let k = (rec.round - plan.first_round) as usize;
        by_round[k].push(rec);
    }
    by_round
        .into_iter()
        .enumerate()
        .map(|(k, mut recs)| {
            recs.sort_by_key(|r| r.worker);
            debug_assert_eq!(recs.len(), cfg.workers);
            let mut traffic = TrafficCounters::default();
            for r in &recs {
                traffic.accumulate(&r.traffic);
            }
            if let Some(t) = records.supervisor.get(k) {
                traffic.accumulate(t);
            }
            RoundOutcome {
                round: plan.first_round + k as u64,
                aggregates: recs.iter().map(|r| r.aggregate.clone()).collect(),
                params: recs.iter().map(|r| r.params.clone()).collect(),
                durations_s: recs.iter().map(|r| r.duration_s).collect(),
                compute_s: recs.iter().map(|r| r.compute_s).collect(),
                transfer_s: recs.iter().map(|r| r.transfer_s).collect(),
                sync_wait_s: recs.iter().map(|r| r.sync_wait_s).collect(),
                announced: recs.iter().map(|r| r.announced).collect(),
                worker_traffic: recs.iter().map(|r| r.traffic.clone()).collect(),
                traffic,
            }
        })
        .collect()
}

/// Payload class a strategy uses for gradient exchange.
pub fn payload_class(kind: StrategyKind) -> SubstrateClass {
    match kind {
        StrategyKind::SpirtP2P => SubstrateClass::LocalDB,
        StrategyKind::SharedStoreBaseline => SubstrateClass::ObjectStore,
        _ => SubstrateClass::SharedDB,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgd::init_model;

    #[test]
    fn strategy_names() {
        for k in StrategyKind::ALL {
            assert_eq!(k.key().parse::<StrategyKind>().unwrap(), k);
            assert_eq!(k.label().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("ringreduce".parse::<StrategyKind>().is_err());
        assert_eq!("Scatter-Reduce".parse::<StrategyKind>().unwrap(), StrategyKind::ScatterReduce);
    }

    #[test]
    fn significance_examples() {
        let dims = Dims::new(2, 1);
        let params = ModelParams::from_flat(dims, &[9.0, 0.0, 0.0, 0.0]).unwrap();
        let unit = GradientVector::new(dims, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(significance_test(&unit, &params, 0.1));
        assert!(!significance_test(&unit, &params, 0.2));
        assert!(significance_test(&unit, &params, 0.0));
        assert!(!significance_test(&GradientVector::zeros(dims), &params, 0.0));
        assert!(!significance_test(&unit, &params, f64::INFINITY));
    }

    #[test]
    fn barrier_wait_ticks() {
        assert_eq!(simulated_barrier_wait(0.0, 0.0, 0.01), 0.01);
        assert_eq!(simulated_barrier_wait(1.0, 0.5, 0.01), 0.01);
        assert!((simulated_barrier_wait(0.0, 0.05, 0.01) - 0.05).abs() < 1e-12);
        assert_eq!(simulated_barrier_wait(0.0, 0.3, 0.0), 0.3);
    }

    #[test]
    fn worker_state_roundtrips_through_checkpoint() {
        let world = World::new(1);
        let mut s = WorkerState::new(0, init_model(3, 4, 1).unwrap());
        s.clock = 0.1 + 0.2;
        s.residual = Some(GradientVector::new(s.params.dims, vec![1.0 / 3.0; 15]).unwrap());
        s.save(&world);
        assert_eq!(WorkerState::load(&world, 0).unwrap(), s);
    }
}
