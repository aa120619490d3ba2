//! MLLess filtered parameter server.
//!
//! Workers only publish updates that pass the significance filter; the rest
//! accumulate in a persisted residual that is added to the next candidate.
//! A supervisor collects one notification per worker per round and then
//! releases everyone with `Proceed`. Each worker averages its own fresh
//! gradient with whatever peers announced.

use std::collections::BTreeMap;

use super::actor::{Advance, Env, Invocation, Step};
use super::link::Link;
use super::{significance_test, EpochPlan, StashedMessage};
use crate::error::{Error, Result};
use crate::sgd::{mean_of, GradientVector};
use crate::substrate::{MessageKind, QueueMessage, TrafficCounters, WorkerId, SUPERVISOR_ID};

const SUPERVISOR_CHECKPOINT: &str = "supervisor";

pub(crate) enum Phase {
    Start,
    /// Waiting for `Proceed`; `received` holds this round's peer messages.
    AwaitProceed {
        own: GradientVector,
        received: Vec<StashedMessage>,
    },
}

pub(crate) fn update_key(round: u64, worker: WorkerId) -> String {
    format!("mlless/{round}/{worker}")
}

pub(crate) fn advance(phase: &mut Phase, env: &Env<'_>, inv: &mut Invocation<'_>) -> Result<Advance> {
    match phase {
        Phase::Start => {
            let g = inv.gradient(env, &inv.batches[0])?;
            let candidate = match inv.state.residual.take() {
                Some(r) => g.add(&r)?,
                None => g.clone(),
            };
            let world = env.world;
            if significance_test(&candidate, &inv.state.params, env.cfg.tau) {
                let key = update_key(inv.round, inv.worker);
                inv.link.kv_put(&world.shared_db, &key, &candidate.values)?;
                for peer in (0..env.workers()).filter(|p| *p != inv.worker) {
                    let msg = QueueMessage::update_key(inv.worker, inv.round, key.clone());
                    inv.link.push(&world.worker_queues[peer], msg);
                }
                let msg = QueueMessage::update_key(inv.worker, inv.round, key);
                inv.link.push(&world.supervisor_queue, msg);
                inv.announced = true;
            } else {
                inv.state.residual = Some(candidate);
                let msg = QueueMessage::signal(inv.worker, inv.round, MessageKind::Done);
                inv.link.push(&world.supervisor_queue, msg);
            }
            let (current, later): (Vec<_>, Vec<_>) = std::mem::take(&mut inv.state.stash)
                .into_iter()
                .partition(|s| s.message.round == inv.round);
            inv.state.stash = later;
            *phase = Phase::AwaitProceed {
                own: g,
                received: current,
            };
            Ok(Advance::Moved)
        }
        Phase::AwaitProceed { own, received } => {
            let queue = &env.world.worker_queues[inv.worker];
            let proceed = loop {
                let Some(got) = inv.link.try_poll(queue) else {
                    return Ok(Advance::Pending(format!(
                        "no Proceed from supervisor for round {} ({} peer updates so far)",
                        inv.round,
                        received.len()
                    )));
                };
                let msg = &got.value;
                if msg.round > inv.round {
                    inv.state.stash.push(got.into());
                    continue;
                }
                if msg.round < inv.round {
                    return Err(env.protocol_error(
                        inv.round,
                        inv.label(),
                        format!("stale {:?} for round {} from sender {}", msg.kind, msg.round, msg.sender),
                    ));
                }
                match msg.kind {
                    MessageKind::Proceed => break StashedMessage::from(got),
                    MessageKind::UpdateKey => received.push(got.into()),
                    other => {
                        return Err(env.protocol_error(
                            inv.round,
                            inv.label(),
                            format!("unexpected {other:?} on worker queue"),
                        ))
                    }
                }
            };
            let consumed = received
                .iter()
                .chain(std::iter::once(&proceed))
                .map(|s| (&s.message, s.ready_at));
            inv.link.receive(consumed);

            let mut peers: BTreeMap<WorkerId, String> = BTreeMap::new();
            for s in received.iter() {
                let key = s.message.payload_key.clone().unwrap_or_default();
                if peers.insert(s.message.sender, key).is_some() {
                    return Err(env.protocol_error(
                        inv.round,
                        inv.label(),
                        format!("duplicate update from worker {}", s.message.sender),
                    ));
                }
            }
            let mut contributions: Vec<Vec<f64>> = Vec::with_capacity(peers.len() + 1);
            let mut own_slot = Some(std::mem::take(&mut own.values));
            for (sender, key) in &peers {
                if *sender > inv.worker {
                    if let Some(v) = own_slot.take() {
                        contributions.push(v);
                    }
                }
                let values = inv.link.kv_get(&env.world.shared_db, key).map_err(|e| {
                    env.protocol_error(inv.round, inv.label(), format!("announced update missing: {e}"))
                })?;
                contributions.push(values);
            }
            if let Some(v) = own_slot.take() {
                contributions.push(v);
            }
            let mean = mean_of(contributions.iter().map(Vec::as_slice))?;
            Ok(Advance::Ready(GradientVector::new(inv.state.params.dims, mean)?))
        }
    }
}

/// Releases each round once every worker has reported in.
pub(crate) struct Supervisor<'a> {
    env: Env<'a>,
    first_round: u64,
    rounds: usize,
    next: usize,
    link: Link,
    inbox: Vec<StashedMessage>,
    pub per_round: Vec<TrafficCounters>,
}

impl<'a> Supervisor<'a> {
    pub fn new(env: Env<'a>, plan: &EpochPlan<'_>) -> Result<Self> {
        let clock = match env.world.checkpoint.load(SUPERVISOR_CHECKPOINT) {
            Ok(bytes) => serde_json::from_slice::<f64>(&bytes)
                .map_err(|e| Error::contract(format!("corrupt supervisor checkpoint: {e}")))?,
            Err(_) => 0.0,
        };
        Ok(Supervisor {
            env,
            first_round: plan.first_round,
            rounds: plan.rounds.len(),
            next: 0,
            link: Link::new(clock, env.cfg.latency),
            inbox: Vec::new(),
            per_round: Vec::new(),
        })
    }

    fn round(&self) -> u64 {
        self.first_round + self.next as u64
    }

    pub fn step(&mut self) -> Result<Step> {
        if self.next == self.rounds {
            return Ok(Step::Done);
        }
        let round = self.round();
        let workers = self.env.workers();
        let mut consumed = false;
        while let Some(got) = self.link.try_poll(&self.env.world.supervisor_queue) {
            consumed = true;
            let msg = &got.value;
            let valid = matches!(msg.kind, MessageKind::UpdateKey | MessageKind::Done)
                && msg.sender < workers
                && msg.round == round;
            if !valid || self.inbox.iter().any(|s| s.message.sender == msg.sender) {
                return Err(self.env.protocol_error(
                    round,
                    "supervisor",
                    format!(
                        "unexpected {:?} for round {} from sender {}",
                        msg.kind, msg.round, msg.sender
                    ),
                ));
            }
            self.inbox.push(got.into());
        }
        if self.inbox.len() < workers {
            if consumed {
                return Ok(Step::Progress);
            }
            let heard: Vec<WorkerId> = self.inbox.iter().map(|s| s.message.sender).collect();
            let missing: Vec<WorkerId> = (0..workers).filter(|w| !heard.contains(w)).collect();
            return Ok(Step::Blocked {
                round,
                detail: format!("supervisor still waiting on workers {missing:?}"),
            });
        }
        let inbox = std::mem::take(&mut self.inbox);
        self.link.receive(inbox.iter().map(|s| (&s.message, s.ready_at)));
        for w in 0..workers {
            let msg = QueueMessage::signal(SUPERVISOR_ID, round, MessageKind::Proceed);
            self.link.push(&self.env.world.worker_queues[w], msg);
        }
        let finished = std::mem::replace(&mut self.link, Link::new(0.0, self.env.cfg.latency));
        self.link = Link::new(finished.now(), self.env.cfg.latency);
        self.per_round.push(finished.tally);
        self.next += 1;
        let bytes = serde_json::to_vec(&self.link.now()).expect("clock serializes");
        self.env.world.checkpoint.save(SUPERVISOR_CHECKPOINT, bytes);
        Ok(Step::Progress)
    }
}
