//! Experiment runner: builds a world from an [`ExperimentConfig`], drives
//! epochs of the chosen protocol, and collects per-epoch metrics.

mod config;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    parse_override, CostSection, DataSection, ExperimentConfig, ModelSection, StrategySection,
    TrainingSection,
};

use crate::cost::{build_cost_report, CostRecord, Deployment, Usage};
use crate::error::{Error, Result};
use crate::sgd::{
    accuracy, apply_update, compute_gradient, compute_loss, generate_synthetic_dataset,
    init_model, mean_of, partition_dataset, Dataset, Dims, GradientVector, Minibatch, ModelParams,
    WorkerSchedule,
};
use crate::strategies::{
    load_workers, run_rounds, seed_workers, ComputeModel, EpochPlan, RoundOutcome, StrategyKind,
};
use crate::substrate::{CheckpointCounters, SubstrateClass, TrafficCounters, World};

/// Metrics for one finished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub rounds: usize,
    /// Training-set accuracy of worker 0's parameters.
    pub train_accuracy: f64,
    pub mean_loss: f64,
    pub mean_invocation_s: f64,
    pub max_invocation_s: f64,
    /// Epoch length when each worker runs its invocations back to back.
    pub serial_epoch_s: f64,
    /// Epoch length when all of a worker's invocations run side by side.
    pub parallel_epoch_s: f64,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub sync_wait_s: f64,
    /// Workers whose update was propagated, summed over rounds (MLLess).
    pub announced_updates: usize,
    pub traffic: TrafficCounters,
    pub cost: CostRecord,
    pub cumulative_cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub strategy: String,
    pub epochs: Vec<EpochMetrics>,
    pub early_stopped: bool,
    pub final_accuracy: f64,
    /// Worker 0's final parameters in flat layout.
    pub final_params: Vec<f64>,
    pub params_digest: String,
    /// Whether every worker held bitwise-identical parameters after every round.
    pub workers_agree: bool,
    /// `‖params − oracle‖₂ / ‖oracle‖₂` for exact configurations.
    pub oracle_divergence: Option<f64>,
    pub traffic_total: TrafficCounters,
    pub checkpoint: CheckpointCounters,
}

impl ExperimentResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// One CSV row per epoch, header included.
    pub fn epochs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for m in &self.epochs {
            w.serialize(EpochRow::new(&self.strategy, self.config.strategy.workers, m))
                .map_err(|e| Error::contract(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::contract(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn final_epoch(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Flat per-epoch record for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub strategy: String,
    pub workers: usize,
    pub epoch: usize,
    pub rounds: usize,
    pub train_accuracy: f64,
    pub mean_loss: f64,
    pub mean_invocation_s: f64,
    pub serial_epoch_s: f64,
    pub parallel_epoch_s: f64,
    pub compute_s: f64,
    pub transfer_s: f64,
    pub sync_wait_s: f64,
    pub announced_updates: usize,
    pub shared_db_bytes_written: u64,
    pub shared_db_bytes_read: u64,
    pub local_db_bytes_written: u64,
    pub local_db_bytes_read: u64,
    pub local_db_peer_bytes_read: u64,
    pub object_store_bytes_written: u64,
    pub object_store_bytes_read: u64,
    pub queue_envelope_bytes: u64,
    pub op_count: u64,
    pub per_invocation_usd: f64,
    pub cost_per_worker_usd: f64,
    pub total_usd: f64,
    pub cumulative_cost_usd: f64,
}

impl EpochRow {
    pub fn new(strategy: &str, workers: usize, m: &EpochMetrics) -> Self {
        let t = &m.traffic;
        let shared = t.class(SubstrateClass::SharedDB);
        let local = t.class(SubstrateClass::LocalDB);
        let object = t.class(SubstrateClass::ObjectStore);
        let queue = t.class(SubstrateClass::Queue);
        EpochRow {
            strategy: strategy.to_string(),
            workers,
            epoch: m.epoch,
            rounds: m.rounds,
            train_accuracy: m.train_accuracy,
            mean_loss: m.mean_loss,
            mean_invocation_s: m.mean_invocation_s,
            serial_epoch_s: m.serial_epoch_s,
            parallel_epoch_s: m.parallel_epoch_s,
            compute_s: m.compute_s,
            transfer_s: m.transfer_s,
            sync_wait_s: m.sync_wait_s,
            announced_updates: m.announced_updates,
            shared_db_bytes_written: shared.bytes_written,
            shared_db_bytes_read: shared.bytes_read,
            local_db_bytes_written: local.bytes_written,
            local_db_bytes_read: local.bytes_read,
            local_db_peer_bytes_read: local.peer_bytes_read,
            object_store_bytes_written: object.bytes_written,
            object_store_bytes_read: object.bytes_read,
            queue_envelope_bytes: queue.envelope_bytes_written + queue.envelope_bytes_read,
            op_count: SubstrateClass::ALL.iter().map(|c| t.class(*c).op_count).sum(),
            per_invocation_usd: m.cost.per_invocation_usd,
            cost_per_worker_usd: m.cost.cost_per_worker_usd,
            total_usd: m.cost.total_usd,
            cumulative_cost_usd: m.cumulative_cost_usd,
        }
    }
}

/// True once accuracy has gone `patience` consecutive epochs without
/// beating the best value so far by more than `min_delta`.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let Some((&first, rest)) = history.split_first() else {
        return false;
    };
    let mut best = first;
    let mut stale = 0;
    for &acc in rest {
        if acc - best > min_delta {
            best = acc;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience.max(1)
}

/// Simulated length of one invocation: the compute term for `batch_size`
/// examples plus the latency charges it incurred.
pub fn invocation_duration(compute: &ComputeModel, dims: Dims, batch_size: usize, charges: &[f64]) -> f64 {
    compute.gradient_seconds(batch_size, dims) + charges.iter().sum::<f64>()
}

/// Hex SHA-256 of the parameters' little-endian bit patterns.
pub fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `‖a − b‖₂ / ‖b‖₂`, or the absolute distance when `b` is zero.
pub fn relative_distance(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

fn model_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

fn partition_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x1000_0000_01B3).wrapping_add(epoch as u64 + 1)
}

/// Each worker's minibatches for `epoch`; the partition is reshuffled every epoch.
pub fn epoch_schedules(cfg: &ExperimentConfig, ds: &Dataset, epoch: usize) -> Result<Vec<WorkerSchedule>> {
    partition_dataset(
        ds,
        cfg.strategy.workers,
        cfg.training.batches_per_worker,
        cfg.training.batch_size,
        partition_seed(cfg.training.seed, epoch),
    )
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate_synthetic_dataset(
        cfg.data.n,
        cfg.model.classes,
        cfg.model.features,
        cfg.data.separation,
        cfg.training.seed,
    )
}

/// Starting parameters shared by every worker and the oracle.
pub fn initial_params(cfg: &ExperimentConfig) -> Result<ModelParams> {
    init_model(cfg.model.classes, cfg.model.features, model_seed(cfg.training.seed))
}

/// Plain single-node SGD over the same batch sequence: each step applies
/// the mean of the `W` workers' gradients for that round, one minibatch per
/// worker. Ignores the strategy.
pub fn oracle_sequential_run(cfg: &ExperimentConfig) -> Result<ModelParams> {
    oracle_for_epochs(cfg, cfg.training.epochs)
}

fn oracle_for_epochs(cfg: &ExperimentConfig, epochs: usize) -> Result<ModelParams> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let mut params = initial_params(cfg)?;
    for epoch in 0..epochs {
        let schedules = epoch_schedules(cfg, &ds, epoch)?;
        for k in 0..cfg.training.batches_per_worker {
            let grads: Vec<GradientVector> = schedules
                .iter()
                .map(|s| compute_gradient(&params, &s.batches[k]))
                .collect::<Result<_>>()?;
            let mean = mean_of(grads.iter().map(|g| g.values.as_slice()))?;
            params = apply_update(&params, &GradientVector::new(params.dims, mean)?, cfg.training.lr)?;
        }
    }
    Ok(params)
}

/// A live experiment: one world, advanced an epoch at a time.
pub struct Experiment {
    cfg: ExperimentConfig,
    dataset: Dataset,
    full_batch: Minibatch,
    world: World,
    epochs: Vec<EpochMetrics>,
    workers_agree: bool,
    final_params: ModelParams,
    traffic_total: TrafficCounters,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = build_dataset(&cfg)?;
        let full_batch = dataset.as_batch()?;
        let params = initial_params(&cfg)?;
        let world = World::new(cfg.strategy.workers);
        seed_workers(&world, &params);
        Ok(Experiment {
            cfg,
            dataset,
            full_batch,
            world,
            epochs: Vec::new(),
            workers_agree: true,
            final_params: params,
            traffic_total: TrafficCounters::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    /// Runs the next epoch and returns its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let cfg = &self.cfg;
        let epoch = self.epochs.len();
        let per_round = cfg.batches_per_round();
        let rounds = cfg.rounds_per_epoch();
        let schedules = epoch_schedules(cfg, &self.dataset, epoch)?;
        let plan = EpochPlan {
            first_round: (epoch * rounds) as u64,
            rounds: (0..rounds)
                .map(|k| {
                    schedules
                        .iter()
                        .map(|s| &s.batches[k * per_round..(k + 1) * per_round])
                        .collect()
                })
                .collect(),
        };
        let outcomes = run_rounds(&cfg.protocol(), &self.world, &plan, cfg.strategy.scheduler)?;
        verify_statelessness(&self.world, cfg, &outcomes)?;

        let last = outcomes.last().expect("at least one round");
        let params = last.params[0].clone();
        self.workers_agree &= outcomes.iter().all(RoundOutcome::workers_agree);

        let workers = cfg.strategy.workers;
        let mut traffic = TrafficCounters::default();
        let mut durations = Vec::with_capacity(rounds * workers);
        let mut per_worker_total = vec![0.0; workers];
        let (mut compute_s, mut transfer_s, mut sync_wait_s) = (0.0, 0.0, 0.0);
        let mut announced = 0;
        for o in &outcomes {
            traffic.accumulate(&o.traffic);
            for w in 0..workers {
                durations.push(o.durations_s[w]);
                per_worker_total[w] += o.durations_s[w];
                compute_s += o.compute_s[w];
                transfer_s += o.transfer_s[w];
                sync_wait_s += o.sync_wait_s[w];
            }
            announced += o.announced.iter().filter(|a| **a).count();
        }
        let max_invocation_s = durations.iter().copied().fold(0.0, f64::max);
        let serial_epoch_s = per_worker_total.iter().copied().fold(0.0, f64::max);
        let usage = Usage {
            invocation_durations_s: durations.clone(),
            invocations_per_worker: rounds as u64,
            workers: workers as u64,
            ram_mb: Some(cfg.cost.ram_mb_assumed),
            epoch_duration_s: Some(serial_epoch_s),
        };
        let deployment = if cfg.strategy.kind == StrategyKind::SharedStoreBaseline {
            Deployment::Gpu
        } else {
            Deployment::Serverless
        };
        let cost = build_cost_report(&usage, &cfg.pricing, deployment)?;
        let cumulative_cost_usd =
            self.epochs.last().map_or(0.0, |m| m.cumulative_cost_usd) + cost.total_usd;

        let metrics = EpochMetrics {
            epoch,
            rounds,
            train_accuracy: accuracy(&params, &self.dataset),
            mean_loss: compute_loss(&params, &self.full_batch)?,
            // rounding can lift the mean of equal durations an ulp above them
            mean_invocation_s: (durations.iter().sum::<f64>() / durations.len() as f64)
                .min(max_invocation_s),
            max_invocation_s,
            serial_epoch_s,
            parallel_epoch_s: max_invocation_s,
            compute_s,
            transfer_s,
            sync_wait_s,
            announced_updates: announced,
            traffic: traffic.clone(),
            cost,
            cumulative_cost_usd,
        };
        info!(
            "{} epoch {epoch}: accuracy {:.4}, loss {:.5}, sync wait {:.4}s",
            cfg.strategy.kind, metrics.train_accuracy, metrics.mean_loss, metrics.sync_wait_s
        );
        self.traffic_total.accumulate(&traffic);
        self.final_params = params;
        self.epochs.push(metrics.clone());
        Ok(metrics)
    }

    pub fn finish(self, early_stopped: bool) -> Result<ExperimentResult> {
        let flat = self.final_params.to_flat();
        let oracle_divergence = if self.cfg.is_exact() {
            let oracle = oracle_for_epochs(&self.cfg, self.epochs.len())?;
            Some(relative_distance(&flat, &oracle.to_flat()))
        } else {
            None
        };
        let final_accuracy = self.epochs.last().map_or(0.0, |m| m.train_accuracy);
        Ok(ExperimentResult {
            strategy: self.cfg.strategy.kind.label().to_string(),
            config: self.cfg,
            epochs: self.epochs,
            early_stopped,
            final_accuracy,
            params_digest: params_digest(&flat),
            final_params: flat,
            workers_agree: self.workers_agree,
            oracle_divergence,
            traffic_total: self.traffic_total,
            checkpoint: self.world.checkpoint.counters(),
        })
    }
}

/// Confirms that what the checkpoint store holds is exactly what the last
/// round produced, and that nothing beyond the protocol's own carry-over
/// (the MLLess residual and early messages) was persisted.
fn verify_statelessness(world: &World, cfg: &ExperimentConfig, outcomes: &[RoundOutcome]) -> Result<()> {
    let last = outcomes.last().expect("at least one round");
    let expected_round = last.round + 1;
    for state in load_workers(world)? {
        let w = state.worker_id;
        if state.params != last.params[w] || state.round != expected_round {
            return Err(Error::contract(format!(
                "worker {w} checkpoint does not match its last round"
            )));
        }
        let carries = cfg.strategy.kind == StrategyKind::MLLessPS;
        if !carries && (state.residual.is_some() || !state.stash.is_empty()) {
            return Err(Error::contract(format!("worker {w} persisted protocol state it does not own")));
        }
    }
    debug!("statelessness verified through round {}", last.round);
    Ok(())
}

/// Runs every configured epoch, stopping early when enabled.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut exp = Experiment::new(cfg.clone())?;
    let mut history = Vec::new();
    let mut early_stopped = false;
    for _ in 0..cfg.training.epochs {
        let m = exp.run_epoch()?;
        history.push(m.train_accuracy);
        if cfg.training.early_stop
            && early_stop_check(&history, cfg.training.patience, cfg.training.min_delta)
        {
            early_stopped = true;
            break;
        }
    }
    exp.finish(early_stopped)
}
