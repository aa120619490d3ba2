//! ScatterReduce: each gradient is cut into `W` contiguous chunks. Worker `i`
//! keeps chunk `i`, uploads the rest, averages every peer's copy of chunk
//! `i`, publishes that reduced chunk, then gathers the other reduced chunks.
//!
//! Per worker (when `W` divides the gradient length) that is `G` payload
//! bytes up and `2(W−1)/W·G` down.

use super::actor::{Advance, Env, Invocation};
use super::chunk::{chunk_concat, chunk_split};
use crate::error::Result;
use crate::sgd::mean_of;

const SCATTERED: &str = "scatter-chunks";
const REDUCED: &str = "scatter-reduced";

pub(crate) enum Phase {
    Start,
    Reduce { own: Vec<f64>, since: f64 },
    Gather { reduced: Vec<f64>, since: f64 },
}

fn chunk_key(round: u64, from: usize, chunk: usize) -> String {
    format!("scatter/{round}/from/{from}/chunk/{chunk}")
}

fn reduced_key(round: u64, chunk: usize) -> String {
    format!("scatter/{round}/reduced/{chunk}")
}

pub(crate) fn advance(phase: &mut Phase, env: &Env<'_>, inv: &mut Invocation<'_>) -> Result<Advance> {
    let db = &env.world.shared_db;
    let workers = env.workers();
    let me = inv.worker;
    match phase {
        Phase::Start => {
            let g = inv.gradient(env, &inv.batches[0])?;
            let mut chunks = chunk_split(&g, workers)?;
            for (j, chunk) in chunks.iter().enumerate() {
                if j != me {
                    inv.link.kv_put(db, &chunk_key(inv.round, me, j), chunk)?;
                }
            }
            inv.link.barrier_add(db, SCATTERED, inv.round, me);
            *phase = Phase::Reduce {
                own: chunks.swap_remove(me),
                since: inv.link.now(),
            };
            Ok(Advance::Moved)
        }
        Phase::Reduce { own, since } => {
            if inv
                .link
                .barrier_poll(db, SCATTERED, inv.round, workers, *since, workers == 1)
                .is_none()
            {
                return Ok(Advance::Pending(format!(
                    "waiting for all {workers} workers to scatter chunks"
                )));
            }
            let mut copies = Vec::with_capacity(workers);
            for j in 0..workers {
                if j == me {
                    copies.push(std::mem::take(own));
                } else {
                    let c = inv.link.kv_get(db, &chunk_key(inv.round, j, me)).map_err(|e| {
                        env.protocol_error(inv.round, inv.label(), format!("chunk missing: {e}"))
                    })?;
                    copies.push(c);
                }
            }
            let reduced = mean_of(copies.iter().map(Vec::as_slice))?;
            if workers > 1 {
                inv.link.kv_put(db, &reduced_key(inv.round, me), &reduced)?;
            }
            inv.link.barrier_add(db, REDUCED, inv.round, me);
            *phase = Phase::Gather {
                reduced,
                since: inv.link.now(),
            };
            Ok(Advance::Moved)
        }
        Phase::Gather { reduced, since } => {
            if inv
                .link
                .barrier_poll(db, REDUCED, inv.round, workers, *since, workers == 1)
                .is_none()
            {
                return Ok(Advance::Pending(format!(
                    "waiting for all {workers} reduced chunks"
                )));
            }
            let mut chunks = Vec::with_capacity(workers);
            for j in 0..workers {
                if j == me {
                    chunks.push(std::mem::take(reduced));
                } else {
                    let c = inv.link.kv_get(db, &reduced_key(inv.round, j)).map_err(|e| {
                        env.protocol_error(inv.round, inv.label(), format!("reduced chunk missing: {e}"))
                    })?;
                    chunks.push(c);
                }
            }
            Ok(Advance::Ready(chunk_concat(&chunks, inv.state.params.dims)?))
        }
    }
}
