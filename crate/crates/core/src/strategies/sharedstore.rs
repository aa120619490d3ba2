//! GPU-baseline pattern: every worker uploads its gradient to a shared
//! bucket, downloads the other `W−1`, and averages locally using its own
//! copy from memory. ObjectStore sees `W·G` written and `W(W−1)·G` read.

use super::actor::{Advance, Env, Invocation};
use crate::error::Result;
use crate::sgd::{mean_of, GradientVector};

pub(crate) enum Phase {
    Start,
    AwaitPeers { own: Vec<f64> },
}

fn prefix(round: u64) -> String {
    format!("sharedstore/{round}/")
}

fn object_key(round: u64, worker: usize) -> String {
    format!("sharedstore/{round}/{worker:06}")
}

pub(crate) fn advance(phase: &mut Phase, env: &Env<'_>, inv: &mut Invocation<'_>) -> Result<Advance> {
    let bucket = &env.world.bucket;
    let workers = env.workers();
    match phase {
        Phase::Start => {
            let g = inv.gradient(env, &inv.batches[0])?;
            inv.link.object_put(bucket, &object_key(inv.round, inv.worker), &g.values)?;
            *phase = Phase::AwaitPeers { own: g.values };
            Ok(Advance::Moved)
        }
        Phase::AwaitPeers { own } => {
            let listed = inv.link.object_list(bucket, &prefix(inv.round));
            if listed.len() < workers {
                return Ok(Advance::Pending(format!(
                    "{} of {workers} gradients listed under {}",
                    listed.len(),
                    prefix(inv.round)
                )));
            }
            inv.link.charge_list();
            let mut grads = Vec::with_capacity(workers);
            for w in 0..workers {
                if w == inv.worker {
                    grads.push(std::mem::take(own));
                } else {
                    let g = inv.link.object_get(bucket, &object_key(inv.round, w)).map_err(|e| {
                        env.protocol_error(inv.round, inv.label(), format!("listed object missing: {e}"))
                    })?;
                    grads.push(g);
                }
            }
            let mean = mean_of(grads.iter().map(Vec::as_slice))?;
            Ok(Advance::Ready(GradientVector::new(inv.state.params.dims, mean)?))
        }
    }
}
