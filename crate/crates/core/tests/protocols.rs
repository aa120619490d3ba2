use gradmesh::sgd::{compute_gradient, init_model, mean_of, Dims, Minibatch, ModelParams};
use gradmesh::strategies::{
    barrier_wait, run_allreduce_round, run_mlless_round, run_round, run_rounds,
    run_scatterreduce_round, run_sharedstore_round, run_spirt_round, seed_workers, EpochPlan,
    ProtocolConfig, RoundOutcome, SchedulerMode, StrategyKind, WorkerState,
};
use gradmesh::substrate::{LatencyModel, SubstrateClass, World};
use gradmesh::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DET: SchedulerMode = SchedulerMode::Deterministic;

fn random_batch(dims: Dims, size: usize, rng: &mut ChaCha8Rng) -> Minibatch {
    let features = (0..size * dims.features)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let labels = (0..size).map(|_| rng.random_range(0..dims.classes)).collect();
    Minibatch::new(dims, features, labels).unwrap()
}

/// `per_worker[w]` holds `m` batches for worker `w`.
fn batches(dims: Dims, workers: usize, m: usize, seed: u64) -> Vec<Vec<Minibatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..workers)
        .map(|_| (0..m).map(|_| random_batch(dims, 8, &mut rng)).collect())
        .collect()
}

fn slices(per_worker: &[Vec<Minibatch>]) -> Vec<&[Minibatch]> {
    per_worker.iter().map(Vec::as_slice).collect()
}

fn setup(workers: usize, dims: Dims, seed: u64) -> (World, ModelParams) {
    let world = World::new(workers);
    let params = init_model(dims.classes, dims.features, seed).unwrap();
    seed_workers(&world, &params);
    (world, params)
}

fn cfg(kind: StrategyKind, workers: usize) -> ProtocolConfig {
    ProtocolConfig::new(kind, workers, 0.1)
}

/// Brute-force two-stage mean: per-worker mean of its batches' gradients,
/// then the mean over workers, both in ascending order.
fn oracle(params: &ModelParams, per_worker: &[Vec<Minibatch>]) -> Vec<f64> {
    let locals: Vec<Vec<f64>> = per_worker
        .iter()
        .map(|bs| {
            let gs: Vec<Vec<f64>> = bs
                .iter()
                .map(|b| compute_gradient(params, b).unwrap().values)
                .collect();
            mean_of(gs.iter().map(Vec::as_slice)).unwrap()
        })
        .collect();
    mean_of(locals.iter().map(Vec::as_slice)).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn grad_bytes(dims: Dims) -> u64 {
    8 * dims.param_len() as u64
}

fn exact_kinds() -> [StrategyKind; 5] {
    StrategyKind::ALL
}

#[test]
fn single_worker_aggregate_is_own_gradient() {
    let dims = Dims::new(3, 5);
    for kind in exact_kinds() {
        let (world, params) = setup(1, dims, 3);
        let per_worker = batches(dims, 1, 1, 9);
        let out = run_round(&cfg(kind, 1), &world, 0, &slices(&per_worker), DET).unwrap();
        let own = compute_gradient(&params, &per_worker[0][0]).unwrap();
        assert_eq!(out.aggregates[0].values, own.values, "{kind}");
    }
}

#[test]
fn single_worker_scatter_and_shared_store_move_no_peer_payload() {
    let dims = Dims::new(3, 5);
    let (world, _) = setup(1, dims, 1);
    let per_worker = batches(dims, 1, 1, 2);
    let out = run_scatterreduce_round(&cfg(StrategyKind::ScatterReduce, 1), &world, 0, &slices(&per_worker), DET)
        .unwrap();
    assert_eq!(out.traffic.payload_bytes(), 0);

    let (world, _) = setup(1, dims, 1);
    let out = run_sharedstore_round(&cfg(StrategyKind::SharedStoreBaseline, 1), &world, 0, &slices(&per_worker), DET)
        .unwrap();
    assert_eq!(out.traffic.class(SubstrateClass::ObjectStore).bytes_read, 0);
}

#[test]
fn four_workers_match_mean_oracle() {
    let dims = Dims::new(3, 15);
    for kind in exact_kinds() {
        let (world, params) = setup(4, dims, 11);
        let per_worker = batches(dims, 4, 1, 12);
        let out = run_round(&cfg(kind, 4), &world, 0, &slices(&per_worker), DET).unwrap();
        let expect = oracle(&params, &per_worker);
        for agg in &out.aggregates {
            assert!(max_abs_diff(&agg.values, &expect) <= 1e-15, "{kind}");
        }
        assert!(out.workers_agree(), "{kind}");
    }
}

#[test]
fn allreduce_traffic_closed_form() {
    for (dims, workers) in [(Dims::new(3, 15), 4), (Dims::new(4, 31), 8), (Dims::new(3, 15), 1)] {
        let (world, _) = setup(workers, dims, 0);
        let per_worker = batches(dims, workers, 1, 1);
        let before = world.traffic_snapshot();
        let out = run_allreduce_round(&cfg(StrategyKind::AllReduce, workers), &world, 0, &slices(&per_worker), DET)
            .unwrap();
        let g = grad_bytes(dims);
        let w = workers as u64;
        let shared = out.traffic.class(SubstrateClass::SharedDB);
        assert_eq!(shared.bytes_written, (w + 1) * g);
        assert_eq!(shared.bytes_read, 2 * w * g);
        let global = world.traffic_snapshot().delta_since(&before);
        assert_eq!(global.class(SubstrateClass::SharedDB).bytes_written, (w + 1) * g);
        assert_eq!(global.class(SubstrateClass::SharedDB).bytes_read, 2 * w * g);
        for class in [SubstrateClass::LocalDB, SubstrateClass::Queue, SubstrateClass::ObjectStore] {
            let c = global.class(class);
            assert_eq!(c.bytes_written + c.bytes_read, 0, "{class}");
        }
    }
}

#[test]
fn scatterreduce_per_worker_traffic_closed_form() {
    for (dims, workers) in [(Dims::new(3, 15), 4), (Dims::new(4, 31), 4), (Dims::new(4, 31), 8)] {
        let (world, params) = setup(workers, dims, 5);
        let per_worker = batches(dims, workers, 1, 6);
        let out = run_scatterreduce_round(
            &cfg(StrategyKind::ScatterReduce, workers),
            &world,
            0,
            &slices(&per_worker),
            DET,
        )
        .unwrap();
        let g = grad_bytes(dims);
        let w = workers as u64;
        for t in &out.worker_traffic {
            let shared = t.class(SubstrateClass::SharedDB);
            assert_eq!(shared.bytes_written, g);
            assert_eq!(shared.bytes_read, 2 * (w - 1) * g / w);
        }
        let expect = oracle(&params, &per_worker);
        assert!(max_abs_diff(&out.aggregates[0].values, &expect) <= 1e-15);
    }
}

#[test]
fn scatterreduce_uneven_chunks_still_exact() {
    let dims = Dims::new(3, 4); // 15 parameters over 4 workers
    let (world, params) = setup(4, dims, 2);
    let per_worker = batches(dims, 4, 1, 3);
    let out = run_scatterreduce_round(&cfg(StrategyKind::ScatterReduce, 4), &world, 0, &slices(&per_worker), DET)
        .unwrap();
    assert_eq!(out.aggregates[0].values, oracle(&params, &per_worker));
    let written: u64 = out.traffic.class(SubstrateClass::SharedDB).bytes_written;
    assert_eq!(written, 4 * grad_bytes(dims));
}

#[test]
fn scatterreduce_rejects_more_workers_than_dims() {
    let dims = Dims::new(2, 1); // 4 parameters
    let (world, _) = setup(5, dims, 0);
    let per_worker = batches(dims, 5, 1, 0);
    let err = run_scatterreduce_round(&cfg(StrategyKind::ScatterReduce, 5), &world, 0, &slices(&per_worker), DET)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn shared_store_traffic_closed_form() {
    let dims = Dims::new(3, 15);
    let workers = 4;
    let (world, _) = setup(workers, dims, 8);
    let per_worker = batches(dims, workers, 1, 8);
    let out = run_sharedstore_round(
        &cfg(StrategyKind::SharedStoreBaseline, workers),
        &world,
        0,
        &slices(&per_worker),
        DET,
    )
    .unwrap();
    let g = grad_bytes(dims);
    let w = workers as u64;
    let obj = out.traffic.class(SubstrateClass::ObjectStore);
    assert_eq!(obj.bytes_written, w * g);
    assert_eq!(obj.bytes_read, w * (w - 1) * g);
    assert_eq!(out.traffic.class(SubstrateClass::SharedDB).bytes_written, 0);
}

#[test]
fn spirt_two_stage_mean_and_no_shared_payload() {
    let dims = Dims::new(3, 15);
    let (world, params) = setup(2, dims, 21);
    let per_worker = batches(dims, 2, 3, 22);
    let out = run_spirt_round(&cfg(StrategyKind::SpirtP2P, 2), &world, 0, &slices(&per_worker), DET).unwrap();
    let expect = oracle(&params, &per_worker);
    for agg in &out.aggregates {
        assert!(max_abs_diff(&agg.values, &expect) <= 1e-15);
    }
    let shared = out.traffic.class(SubstrateClass::SharedDB);
    assert_eq!(shared.bytes_written + shared.bytes_read, 0);
    let local = out.traffic.class(SubstrateClass::LocalDB);
    assert!(local.bytes_written > 0);
    // each worker pulls exactly one peer average
    assert_eq!(local.peer_bytes_read, 2 * grad_bytes(dims));
}

#[test]
fn spirt_unequal_batch_counts_use_mean_of_means() {
    let dims = Dims::new(3, 4);
    let (world, params) = setup(2, dims, 4);
    let mut per_worker = batches(dims, 2, 3, 5);
    per_worker[1].truncate(1);
    let out = run_spirt_round(&cfg(StrategyKind::SpirtP2P, 2), &world, 0, &slices(&per_worker), DET).unwrap();
    assert!(max_abs_diff(&out.aggregates[0].values, &oracle(&params, &per_worker)) <= 1e-15);
}

#[test]
fn mlless_tau_zero_matches_allreduce() {
    let dims = Dims::new(3, 15);
    let per_worker = batches(dims, 4, 1, 30);
    let (w1, _) = setup(4, dims, 31);
    let ar = run_allreduce_round(&cfg(StrategyKind::AllReduce, 4), &w1, 0, &slices(&per_worker), DET).unwrap();
    let (w2, _) = setup(4, dims, 31);
    let ml = run_mlless_round(&cfg(StrategyKind::MLLessPS, 4), &w2, 0, &slices(&per_worker), DET).unwrap();
    for (a, b) in ar.aggregates.iter().zip(&ml.aggregates) {
        assert!(max_abs_diff(&a.values, &b.values) <= 1e-15);
    }
    assert!(ml.announced.iter().all(|a| *a));
}

#[test]
fn mlless_infinite_tau_keeps_everything_local() {
    let dims = Dims::new(3, 15);
    let (world, params) = setup(4, dims, 40);
    let per_worker = batches(dims, 4, 1, 41);
    let mut c = cfg(StrategyKind::MLLessPS, 4);
    c.tau = f64::INFINITY;
    let out = run_mlless_round(&c, &world, 0, &slices(&per_worker), DET).unwrap();
    let shared = out.traffic.class(SubstrateClass::SharedDB);
    assert_eq!(shared.bytes_written + shared.bytes_read, 0);
    for (w, agg) in out.aggregates.iter().enumerate() {
        let own = compute_gradient(&params, &per_worker[w][0]).unwrap();
        assert_eq!(agg.values, own.values);
    }
    let states: Vec<WorkerState> = (0..4).map(|w| WorkerState::load(&world, w).unwrap()).collect();
    assert!(states.iter().all(|s| s.residual.is_some()));
}

fn epoch_plan_batches(dims: Dims, workers: usize, rounds: usize, seed: u64) -> Vec<Vec<Vec<Minibatch>>> {
    (0..rounds)
        .map(|r| batches(dims, workers, 1, seed * 1000 + r as u64))
        .collect()
}

fn run_epoch(
    c: &ProtocolConfig,
    dims: Dims,
    seed: u64,
    rounds: &[Vec<Vec<Minibatch>>],
    mode: SchedulerMode,
) -> (World, Vec<RoundOutcome>) {
    let (world, _) = setup(c.workers, dims, seed);
    let plan = EpochPlan {
        first_round: 0,
        rounds: rounds.iter().map(|r| slices(r)).collect(),
    };
    let out = run_rounds(c, &world, &plan, mode).unwrap();
    (world, out)
}

#[test]
fn mlless_shared_traffic_non_increasing_in_tau() {
    let dims = Dims::new(3, 15);
    let rounds = epoch_plan_batches(dims, 4, 12, 50);
    let mut last = u64::MAX;
    for tau in [0.0, 0.01, 0.1, 1.0] {
        let mut c = cfg(StrategyKind::MLLessPS, 4);
        c.tau = tau;
        let (_, out) = run_epoch(&c, dims, 51, &rounds, DET);
        let written: u64 = out
            .iter()
            .map(|o| o.traffic.class(SubstrateClass::SharedDB).bytes_written)
            .sum();
        assert!(written <= last, "tau {tau}: {written} > {last}");
        last = written;
    }
}

#[test]
fn mlless_residual_is_folded_into_next_candidate() {
    // A threshold between one gradient and two accumulated ones: the first
    // round stays local, the second publishes the accumulated update.
    let dims = Dims::new(3, 15);
    let (world, params) = setup(1, dims, 60);
    let per_worker = batches(dims, 1, 1, 61);
    let g = compute_gradient(&params, &per_worker[0][0]).unwrap();
    let ratio = g.l2_norm() / params.l2_norm();
    let mut c = cfg(StrategyKind::MLLessPS, 1);
    c.lr = 1e-12;
    c.tau = 1.5 * ratio;
    let rounds = vec![per_worker.clone(), per_worker.clone()];
    let plan = EpochPlan {
        first_round: 0,
        rounds: rounds.iter().map(|r| slices(r)).collect(),
    };
    let out = run_rounds(&c, &world, &plan, DET).unwrap();
    assert!(!out[0].announced[0]);
    assert!(out[1].announced[0]);
    assert_eq!(out[1].traffic.class(SubstrateClass::SharedDB).bytes_written, grad_bytes(dims));
    assert!(WorkerState::load(&world, 0).unwrap().residual.is_none());
}

#[test]
fn deterministic_and_concurrent_rounds_are_identical() {
    let dims = Dims::new(3, 15);
    for kind in exact_kinds() {
        for workers in [1, 3, 4] {
            let rounds = epoch_plan_batches(dims, workers, 6, 70 + workers as u64);
            let mut c = cfg(kind, workers);
            if kind == StrategyKind::MLLessPS {
                c.tau = 0.02;
            }
            let (_, det) = run_epoch(&c, dims, 71, &rounds, SchedulerMode::Deterministic);
            let (_, con) = run_epoch(&c, dims, 71, &rounds, SchedulerMode::Concurrent);
            assert_eq!(det, con, "{kind} W={workers}");
        }
    }
}

#[test]
fn checkpoint_store_sees_one_save_and_load_per_worker_round() {
    let dims = Dims::new(3, 4);
    let rounds = epoch_plan_batches(dims, 3, 5, 80);
    let (world, _) = run_epoch(&cfg(StrategyKind::AllReduce, 3), dims, 80, &rounds, DET);
    let c = world.checkpoint.counters();
    assert_eq!(c.loads, 15);
    assert_eq!(c.saves, 3 + 15);
    for w in 0..3 {
        assert_eq!(WorkerState::load(&world, w).unwrap().round, 5);
    }
}

#[test]
fn barrier_wait_waits_for_straggler() {
    let dims = Dims::new(3, 15);
    let workers = 4;
    let mut c = cfg(StrategyKind::SpirtP2P, workers);
    c.latency = LatencyModel::default();
    let tick = c.latency.class(SubstrateClass::Queue).fixed_latency;

    // Everyone arrives together: a single poll tick.
    let (world, _) = setup(workers, dims, 90);
    let per_worker = batches(dims, workers, 1, 91);
    let out = run_spirt_round(&c, &world, 0, &slices(&per_worker), DET).unwrap();
    for wait in &out.sync_wait_s {
        assert!((wait - tick).abs() < 1e-12, "{wait}");
    }

    // Worker 3 starts k ticks late.
    let k = 25.0;
    let (world, _) = setup(workers, dims, 90);
    let mut late = WorkerState::load(&world, 3).unwrap();
    late.clock = k * tick;
    late.save(&world);
    let out = run_spirt_round(&c, &world, 0, &slices(&per_worker), DET).unwrap();
    for w in 0..3 {
        assert!(out.sync_wait_s[w] >= k * tick - 1e-12, "{:?}", out.sync_wait_s);
    }
    assert!(out.sync_wait_s[3] < 2.0 * tick);
}

#[test]
fn blocking_barrier_wait_contract() {
    let world = World::new(4);
    let store = &world.shared_db;
    let wait = barrier_wait(store, StrategyKind::SpirtP2P, "b", 0, 0, 1, 5, 0.0, 0.01, world.hub()).unwrap();
    assert_eq!(wait, 0.0);

    store.barrier_add("b", 1, 0, 0.0);
    store.barrier_add("b", 1, 2, 0.0);
    let err = barrier_wait(store, StrategyKind::SpirtP2P, "b", 1, 0, 4, 3, 0.0, 0.01, world.hub()).unwrap_err();
    match err {
        Error::Protocol { detail, .. } => assert!(detail.contains("[1, 3]"), "{detail}"),
        other => panic!("unexpected {other:?}"),
    }

    for w in 0..4 {
        store.barrier_add("b", 2, w, 0.0);
    }
    let wait = barrier_wait(store, StrategyKind::SpirtP2P, "b", 2, 0, 4, 3, 0.0, 0.01, world.hub()).unwrap();
    assert_eq!(wait, 0.01);
}

#[test]
fn world_size_mismatch_is_config_error() {
    let dims = Dims::new(3, 4);
    let (world, _) = setup(2, dims, 0);
    let per_worker = batches(dims, 3, 1, 0);
    let err = run_round(&cfg(StrategyKind::AllReduce, 3), &world, 0, &slices(&per_worker), DET).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_exact_strategy_equals_oracle(seed in 0u64..1000, wi in 0usize..4) {
        let workers = [1usize, 2, 4, 8][wi];
        let dims = Dims::new(3, 15);
        let per_worker = batches(dims, workers, 1, seed);
        for kind in exact_kinds() {
            let (world, params) = setup(workers, dims, seed);
            let out = run_round(&cfg(kind, workers), &world, 0, &slices(&per_worker), DET).unwrap();
            let expect = oracle(&params, &per_worker);
            for agg in &out.aggregates {
                prop_assert_eq!(&agg.values, &expect);
            }
            prop_assert!(out.workers_agree());
        }
    }
}
