use log::trace;

use super::link::Link;
use super::mlless::Supervisor;
use super::{
    allreduce, mlless, scatter, sharedstore, spirt, EpochPlan, ProtocolConfig, StrategyKind,
    WorkerRoundRecord, WorkerState,
};
use crate::error::{Error, Result};
use crate::sgd::{apply_update, compute_gradient, GradientVector, Minibatch};
use crate::substrate::{TrafficCounters, WorkerId, World};

#[derive(Clone, Copy)]
pub(crate) struct Env<'a> {
    pub world: &'a World,
    pub cfg: &'a ProtocolConfig,
}

impl<'a> Env<'a> {
    pub fn workers(&self) -> usize {
        self.cfg.workers
    }

    pub fn protocol_error(&self, round: u64, actor: impl Into<String>, detail: impl Into<String>) -> Error {
        Error::Protocol {
            strategy: self.cfg.kind,
            round,
            actor: actor.into(),
            detail: detail.into(),
        }
    }
}

/// Outcome of one scheduling step.
#[derive(Debug)]
pub(crate) enum Step {
    Progress,
    Blocked { round: u64, detail: String },
    Done,
}

/// Result of advancing a protocol phase once.
pub(crate) enum Advance {
    Moved,
    Pending(String),
    Ready(GradientVector),
}

/// One stateless worker invocation: everything here is dropped when the round ends.
pub(crate) struct Invocation<'a> {
    pub worker: WorkerId,
    pub round: u64,
    pub state: WorkerState,
    pub link: Link,
    pub batches: &'a [Minibatch],
    pub announced: bool,
}

impl<'a> Invocation<'a> {
    pub fn gradient(&mut self, env: &Env<'_>, batch: &Minibatch) -> Result<GradientVector> {
        let g = compute_gradient(&self.state.params, batch)?;
        self.link
            .compute(env.cfg.compute.gradient_seconds(batch.size(), batch.dims));
        Ok(g)
    }

    pub fn label(&self) -> String {
        format!("worker {}", self.worker)
    }
}

pub(crate) enum Phase {
    AllReduce(allreduce::Phase),
    Scatter(scatter::Phase),
    Spirt(spirt::Phase),
    MLLess(mlless::Phase),
    SharedStore(sharedstore::Phase),
}

impl Phase {
    fn start(kind: StrategyKind) -> Phase {
        match kind {
            StrategyKind::AllReduce => Phase::AllReduce(allreduce::Phase::Start),
            StrategyKind::ScatterReduce => Phase::Scatter(scatter::Phase::Start),
            StrategyKind::SpirtP2P => Phase::Spirt(spirt::Phase::Start),
            StrategyKind::MLLessPS => Phase::MLLess(mlless::Phase::Start),
            StrategyKind::SharedStoreBaseline => Phase::SharedStore(sharedstore::Phase::Start),
        }
    }

    fn advance(&mut self, env: &Env<'_>, inv: &mut Invocation<'_>) -> Result<Advance> {
        match self {
            Phase::AllReduce(p) => allreduce::advance(p, env, inv),
            Phase::Scatter(p) => scatter::advance(p, env, inv),
            Phase::Spirt(p) => spirt::advance(p, env, inv),
            Phase::MLLess(p) => mlless::advance(p, env, inv),
            Phase::SharedStore(p) => sharedstore::advance(p, env, inv),
        }
    }
}

pub(crate) struct WorkerActor<'a> {
    env: Env<'a>,
    worker: WorkerId,
    plan: &'a EpochPlan<'a>,
    next: usize,
    current: Option<(Invocation<'a>, Phase)>,
    pub records: Vec<WorkerRoundRecord>,
}

impl<'a> WorkerActor<'a> {
    pub fn new(env: Env<'a>, worker: WorkerId, plan: &'a EpochPlan<'a>) -> Self {
        WorkerActor {
            env,
            worker,
            plan,
            next: 0,
            current: None,
            records: Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        format!("worker {}", self.worker)
    }

    fn begin(&mut self) -> Result<()> {
        let state = WorkerState::load(self.env.world, self.worker)?;
        debug_assert_eq!(state.worker_id, self.worker);
        let round = self.plan.first_round + self.next as u64;
        let inv = Invocation {
            worker: self.worker,
            round,
            link: Link::new(state.clock, self.env.cfg.latency),
            state,
            batches: self.plan.rounds[self.next][self.worker],
            announced: false,
        };
        trace!("{} begins round {round}", self.label());
        self.current = Some((inv, Phase::start(self.env.cfg.kind)));
        Ok(())
    }

    fn finish(&mut self, aggregate: GradientVector) -> Result<()> {
        let (mut inv, _) = self.current.take().expect("active invocation");
        if !aggregate.is_finite() {
            return Err(self
                .env
                .protocol_error(inv.round, inv.label(), "aggregate contains non-finite values"));
        }
        let params = apply_update(&inv.state.params, &aggregate, self.env.cfg.lr)?;
        inv.state.params = params.clone();
        inv.state.round += 1;
        inv.state.clock = inv.link.now();
        inv.state.save(self.env.world);
        self.records.push(WorkerRoundRecord {
            worker: self.worker,
            round: inv.round,
            aggregate,
            params,
            duration_s: inv.link.elapsed(),
            compute_s: inv.link.compute_s,
            transfer_s: inv.link.transfer_s,
            sync_wait_s: inv.link.sync_wait_s,
            traffic: inv.link.tally,
            announced: inv.announced,
        });
        self.next += 1;
        Ok(())
    }

    pub fn step(&mut self) -> Result<Step> {
        if self.current.is_none() {
            if self.next == self.plan.rounds.len() {
                return Ok(Step::Done);
            }
            self.begin()?;
        }
        let env = self.env;
        let mut moved = false;
        loop {
            let (inv, phase) = self.current.as_mut().expect("active invocation");
            match phase.advance(&env, inv)? {
                Advance::Moved => moved = true,
                Advance::Pending(detail) => {
                    if moved {
                        return Ok(Step::Progress);
                    }
                    return Ok(Step::Blocked {
                        round: inv.round,
                        detail,
                    });
                }
                Advance::Ready(aggregate) => {
                    self.finish(aggregate)?;
                    return Ok(Step::Progress);
                }
            }
        }
    }
}

pub(crate) enum AnyActor<'a> {
    Worker(WorkerActor<'a>),
    Supervisor(Supervisor<'a>),
}

impl<'a> AnyActor<'a> {
    pub fn label(&self) -> String {
        match self {
            AnyActor::Worker(w) => w.label(),
            AnyActor::Supervisor(_) => "supervisor".to_string(),
        }
    }

    pub fn step(&mut self) -> Result<Step> {
        match self {
            AnyActor::Worker(w) => w.step(),
            AnyActor::Supervisor(s) => s.step(),
        }
    }
}

pub(crate) enum ActorOutput {
    Worker(Vec<WorkerRoundRecord>),
    Supervisor(Vec<TrafficCounters>),
}

impl<'a> From<AnyActor<'a>> for ActorOutput {
    fn from(a: AnyActor<'a>) -> Self {
        match a {
            AnyActor::Worker(w) => ActorOutput::Worker(w.records),
            AnyActor::Supervisor(s) => ActorOutput::Supervisor(s.per_round),
        }
    }
}
