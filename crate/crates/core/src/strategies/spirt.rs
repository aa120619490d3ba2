//! SPIRT peer-to-peer rounds.
//!
//! Each worker writes its `m` minibatch gradients to its own local database
//! and averages them in place. After a synchronization barrier it pulls the
//! `W−1` peer averages straight from the peers' local databases, stores them
//! next to its own, averages again inside its database, and applies the
//! stored result. No gradient payload ever touches the shared database.

use super::actor::{Advance, Env, Invocation};
use crate::error::Result;
use crate::sgd::GradientVector;

const SYNC_BARRIER: &str = "spirt-sync";

pub(crate) enum Phase {
    Start,
    Synchronize { since: f64 },
}

fn grad_key(round: u64, worker: usize, k: usize) -> String {
    format!("spirt/{round}/{worker}/grad/{k}")
}

fn local_avg_key(round: u64, worker: usize) -> String {
    format!("spirt/{round}/{worker}/local")
}

fn peer_copy_key(round: u64, worker: usize, peer: usize) -> String {
    format!("spirt/{round}/{worker}/peer/{peer}")
}

fn agg_key(round: u64, worker: usize) -> String {
    format!("spirt/{round}/{worker}/agg")
}

pub(crate) fn advance(phase: &mut Phase, env: &Env<'_>, inv: &mut Invocation<'_>) -> Result<Advance> {
    let workers = env.workers();
    let me = inv.worker;
    let own_db = &env.world.local_dbs[me];
    match phase {
        Phase::Start => {
            let mut keys = Vec::with_capacity(inv.batches.len());
            for (k, batch) in inv.batches.iter().enumerate() {
                let g = inv.gradient(env, batch)?;
                let key = grad_key(inv.round, me, k);
                inv.link.kv_put(own_db, &key, &g.values)?;
                keys.push(key);
            }
            inv.link
                .kv_server_average(own_db, &keys, &local_avg_key(inv.round, me))?;
            inv.link.barrier_add(&env.world.sync, SYNC_BARRIER, inv.round, me);
            *phase = Phase::Synchronize {
                since: inv.link.now(),
            };
            Ok(Advance::Moved)
        }
        Phase::Synchronize { since } => {
            let Some(status) = inv.link.barrier_poll(
                &env.world.sync,
                SYNC_BARRIER,
                inv.round,
                workers,
                *since,
                workers == 1,
            ) else {
                return Ok(Advance::Pending(format!(
                    "sync barrier incomplete for round {}",
                    inv.round
                )));
            };
            debug_assert!(status.missing(workers).is_empty());
            let mut inputs = Vec::with_capacity(workers);
            for peer in 0..workers {
                if peer == me {
                    inputs.push(local_avg_key(inv.round, me));
                    continue;
                }
                let avg = inv
                    .link
                    .kv_get_peer(&env.world.local_dbs[peer], &local_avg_key(inv.round, peer))
                    .map_err(|e| {
                        env.protocol_error(inv.round, inv.label(), format!("peer average missing: {e}"))
                    })?;
                let key = peer_copy_key(inv.round, me, peer);
                inv.link.kv_put(own_db, &key, &avg)?;
                inputs.push(key);
            }
            let agg = agg_key(inv.round, me);
            inv.link.kv_server_average(own_db, &inputs, &agg)?;
            let values = inv.link.kv_get(own_db, &agg)?;
            Ok(Advance::Ready(GradientVector::new(inv.state.params.dims, values)?))
        }
    }
}
