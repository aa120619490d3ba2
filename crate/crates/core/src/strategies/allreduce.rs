//! Centralized AllReduce: every worker uploads its gradient, worker 0 fetches
//! all of them (its own included), writes the mean, and every worker fetches
//! the mean back.
//!
//! Per round with a gradient of `G` payload bytes the SharedDB sees
//! `(W+1)·G` written and `2W·G` read.

use super::actor::{Advance, Env, Invocation};
use crate::error::Result;
use crate::sgd::{mean_of, GradientVector};

const MASTER: usize = 0;
const GRADS_READY: &str = "allreduce-grads";
const AGG_READY: &str = "allreduce-agg";

pub(crate) enum Phase {
    Start,
    /// Master only: waiting for every gradient to land.
    CollectGradients { since: f64 },
    /// Waiting for the master to publish the mean.
    AwaitAggregate { since: f64 },
    FetchAggregate,
}

fn grad_key(round: u64, worker: usize) -> String {
    format!("allreduce/{round}/grad/{worker}")
}

fn agg_key(round: u64) -> String {
    format!("allreduce/{round}/agg")
}

pub(crate) fn advance(phase: &mut Phase, env: &Env<'_>, inv: &mut Invocation<'_>) -> Result<Advance> {
    let db = &env.world.shared_db;
    let workers = env.workers();
    match phase {
        Phase::Start => {
            let g = inv.gradient(env, &inv.batches[0])?;
            inv.link.kv_put(db, &grad_key(inv.round, inv.worker), &g.values)?;
            inv.link.barrier_add(db, GRADS_READY, inv.round, inv.worker);
            let since = inv.link.now();
            *phase = if inv.worker == MASTER {
                Phase::CollectGradients { since }
            } else {
                Phase::AwaitAggregate { since }
            };
            Ok(Advance::Moved)
        }
        Phase::CollectGradients { since } => {
            let Some(_) = inv
                .link
                .barrier_poll(db, GRADS_READY, inv.round, workers, *since, workers == 1)
            else {
                return Ok(Advance::Pending(format!(
                    "master waiting for {workers} gradients at {}",
                    grad_key(inv.round, 0)
                )));
            };
            let mut grads = Vec::with_capacity(workers);
            for w in 0..workers {
                let g = inv.link.kv_get(db, &grad_key(inv.round, w)).map_err(|e| {
                    env.protocol_error(inv.round, inv.label(), format!("gradient missing after barrier: {e}"))
                })?;
                grads.push(g);
            }
            let mean = mean_of(grads.iter().map(Vec::as_slice))?;
            inv.link.kv_put(db, &agg_key(inv.round), &mean)?;
            inv.link.barrier_add(db, AGG_READY, inv.round, MASTER);
            *phase = Phase::FetchAggregate;
            Ok(Advance::Moved)
        }
        Phase::AwaitAggregate { since } => {
            let Some(_) = inv.link.barrier_poll(db, AGG_READY, inv.round, 1, *since, false) else {
                return Ok(Advance::Pending(format!(
                    "waiting for master to publish {}",
                    agg_key(inv.round)
                )));
            };
            *phase = Phase::FetchAggregate;
            Ok(Advance::Moved)
        }
        Phase::FetchAggregate => {
            let values = inv.link.kv_get(db, &agg_key(inv.round)).map_err(|e| {
                env.protocol_error(inv.round, inv.label(), format!("aggregate missing: {e}"))
            })?;
            Ok(Advance::Ready(GradientVector::new(inv.state.params.dims, values)?))
        }
    }
}
