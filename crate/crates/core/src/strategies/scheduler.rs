use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};

use super::actor::{ActorOutput, AnyActor, Env, Step, WorkerActor};
use super::mlless::Supervisor;
use super::{EpochPlan, ProtocolConfig, StrategyKind, WorkerRoundRecord};
use crate::error::{Error, Result};
use crate::substrate::{TrafficCounters, World};

/// How long a blocked thread sleeps before re-polling when nothing changes.
const IDLE_WAIT: Duration = Duration::from_millis(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerMode {
    /// Single-threaded round-robin over the actors.
    #[default]
    Deterministic,
    /// One OS thread per actor.
    Concurrent,
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerMode::Deterministic => "deterministic",
            SchedulerMode::Concurrent => "concurrent",
        })
    }
}

impl FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deterministic" => Ok(SchedulerMode::Deterministic),
            "concurrent" => Ok(SchedulerMode::Concurrent),
            _ => Err(Error::config(format!("unknown scheduler '{s}'"))),
        }
    }
}

pub(crate) struct EpochRecords {
    pub workers: Vec<WorkerRoundRecord>,
    /// Supervisor traffic per round index (MLLess only).
    pub supervisor: Vec<TrafficCounters>,
}

fn build_actors<'a>(env: Env<'a>, plan: &'a EpochPlan<'a>) -> Result<Vec<AnyActor<'a>>> {
    let mut actors: Vec<AnyActor<'a>> = (0..env.workers())
        .map(|w| AnyActor::Worker(WorkerActor::new(env, w, plan)))
        .collect();
    if env.cfg.kind == StrategyKind::MLLessPS {
        actors.push(AnyActor::Supervisor(Supervisor::new(env, plan)?));
    }
    Ok(actors)
}

fn collect(outputs: Vec<ActorOutput>) -> EpochRecords {
    let mut records = EpochRecords {
        workers: Vec::new(),
        supervisor: Vec::new(),
    };
    for out in outputs {
        match out {
            ActorOutput::Worker(r) => records.workers.extend(r),
            ActorOutput::Supervisor(s) => records.supervisor = s,
        }
    }
    records
}

fn budget_error(env: &Env<'_>, label: String, round: u64, detail: String) -> Error {
    env.protocol_error(
        round,
        label,
        format!("poll budget of {} exhausted: {detail}", env.cfg.poll_budget),
    )
}

pub(crate) fn run<'a>(
    cfg: &'a ProtocolConfig,
    world: &'a World,
    plan: &'a EpochPlan<'a>,
    mode: SchedulerMode,
) -> Result<EpochRecords> {
    let env = Env { world, cfg };
    world.clear_abort();
    let actors = build_actors(env, plan)?;
    debug!(
        "running {} rounds of {} with {} actors ({mode})",
        plan.rounds.len(),
        cfg.kind,
        actors.len()
    );
    let outputs = match mode {
        SchedulerMode::Deterministic => run_deterministic(env, actors)?,
        SchedulerMode::Concurrent => run_concurrent(env, actors)?,
    };
    Ok(collect(outputs))
}

fn run_deterministic<'a>(env: Env<'a>, mut actors: Vec<AnyActor<'a>>) -> Result<Vec<ActorOutput>> {
    let mut done = vec![false; actors.len()];
    let mut polls = vec![0u64; actors.len()];
    loop {
        let mut progressed = false;
        let mut blocked = Vec::new();
        for (i, actor) in actors.iter_mut().enumerate() {
            if done[i] {
                continue;
            }
            match actor.step()? {
                Step::Progress => {
                    progressed = true;
                    polls[i] = 0;
                }
                Step::Done => {
                    progressed = true;
                    done[i] = true;
                }
                Step::Blocked { round, detail } => {
                    polls[i] += 1;
                    if polls[i] >= env.cfg.poll_budget {
                        return Err(budget_error(&env, actor.label(), round, detail));
                    }
                    blocked.push((actor.label(), round, detail));
                }
            }
        }
        if done.iter().all(|d| *d) {
            break;
        }
        if !progressed {
            let (label, round, detail) = blocked.remove(0);
            let others: Vec<String> = blocked.into_iter().map(|(l, _, d)| format!("{l}: {d}")).collect();
            return Err(env.protocol_error(
                round,
                label,
                format!("no actor can make progress: {detail}; also blocked: [{}]", others.join("; ")),
            ));
        }
    }
    Ok(actors.into_iter().map(ActorOutput::from).collect())
}

fn drive(env: Env<'_>, actor: &mut AnyActor<'_>) -> Result<()> {
    let hub = env.world.hub();
    let mut polls = 0u64;
    loop {
        if env.world.is_aborted() {
            return Err(env.protocol_error(0, actor.label(), "aborted after a peer failed"));
        }
        let seen = hub.version();
        match actor.step() {
            Ok(Step::Progress) => polls = 0,
            Ok(Step::Done) => return Ok(()),
            Ok(Step::Blocked { round, detail }) => {
                polls += 1;
                if polls >= env.cfg.poll_budget {
                    return Err(budget_error(&env, actor.label(), round, detail));
                }
                hub.wait_for_change(seen, IDLE_WAIT);
            }
            Err(e) => return Err(e),
        }
    }
}

fn run_concurrent<'a>(env: Env<'a>, actors: Vec<AnyActor<'a>>) -> Result<Vec<ActorOutput>> {
    let results: Vec<(Result<()>, AnyActor<'a>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = actors
            .into_iter()
            .map(|mut actor| {
                scope.spawn(move || {
                    let r = drive(env, &mut actor);
                    if r.is_err() {
                        env.world.abort();
                    }
                    (r, actor)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("actor thread panicked"))
            .collect()
    });
    // Report the root cause rather than the peers that were aborted because of it.
    let mut first_err = None;
    for (r, _) in &results {
        if let Err(e) = r {
            let secondary = matches!(e, Error::Protocol { detail, .. } if detail.starts_with("aborted"));
            if !secondary {
                first_err.get_or_insert_with(|| e.clone());
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if let Some((Err(e), _)) = results.iter().find(|(r, _)| r.is_err()) {
        return Err(e.clone());
    }
    Ok(results.into_iter().map(|(_, a)| ActorOutput::from(a)).collect())
}
