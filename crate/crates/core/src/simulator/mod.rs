//! Discrete-event execution of one generation step.
//!
//! Each decode actor advances in ticks; one tick emits one token for every
//! live response and lasts `tpot(live, context)`, where the context is the
//! longest `prompt_len + generated` among live responses. Actors interact
//! only through migrations, so events from all actors share one queue
//! ordered by time and insertion order.

mod training;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{ActorId, GenerationPlan, PrefillPlan};
use crate::placement::PlacementPlan;
use crate::profile::LatencyProfile;
use crate::workload::{PromptId, StepRecord};

pub use training::{run_training, PlanTimings, StepPlanner, StepReport, Strategy, TrainingConfig, TrainingReport, TrainingSummary};

pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Fraction of an actor's own responses that must finish before the rest are cut.
    pub tau: f64,
    /// Bytes moved per context token of a migrated response; infinity disables migration.
    pub migration_bytes_per_token: f64,
    /// Fixed latency of the preparation phase, seconds.
    pub prep_seconds: f64,
    /// Fixed latency of the learning phase, seconds.
    pub learn_seconds: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tau: DEFAULT_TAU,
            migration_bytes_per_token: 36_864.0,
            prep_seconds: 8.0,
            learn_seconds: 25.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.migration_bytes_per_token >= 0.0) {
            return Err(Error::Config("migration bytes per token must be non-negative".into()));
        }
        if !(self.prep_seconds >= 0.0 && self.learn_seconds >= 0.0) {
            return Err(Error::Config("phase latencies must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Invoke,
    Start,
    Finish,
    Cut,
    Migrate,
    Arrive,
    Release,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub event: EventKind,
    /// Decode actor id; `None` for the prefill actor.
    pub actor: Option<ActorId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<PromptId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_idx: Option<usize>,
    /// Tokens generated so far (finish, cut, migrate, arrive).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u64>,
    /// Destination actor of a migration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to: Option<ActorId>,
    /// GPUs held (invoke, release).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpus: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorInterval {
    pub actor_id: ActorId,
    pub gpu_count: u32,
    /// Billing starts here.
    pub invoke: f64,
    pub decode_start: f64,
    /// Last local token or hand-off.
    pub busy_end: f64,
    /// Billing ends here.
    pub release: f64,
    pub assigned: usize,
    pub migrated_out: usize,
    pub migrated_in: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefillInterval {
    pub gpu_count: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseOutcome {
    pub prompt_id: PromptId,
    pub response_idx: usize,
    pub actual_len: u64,
    pub generated: u64,
    pub finished_at: f64,
    pub finished_on: ActorId,
    pub migrated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub step_idx: u64,
    /// Generation, preparation and learning.
    pub wall_time: f64,
    pub generation_time: f64,
    pub prefill: Option<PrefillInterval>,
    pub actors: Vec<ActorInterval>,
    pub gpu_seconds: f64,
    pub dollars: f64,
    /// Responses interrupted and moved to another actor.
    pub cuts: usize,
    pub migrations: usize,
    pub transfer_seconds: f64,
    pub prefill_tokens: u64,
    /// Prefill tokens beyond the distinct prompt tokens of the batch.
    pub redundant_prefill_tokens: u64,
    pub responses: Vec<ResponseOutcome>,
    pub events: Vec<Event>,
}

impl SimResult {
    pub fn write_events<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Decode duration of each actor.
    pub fn decode_times(&self) -> Vec<f64> {
        self.actors.iter().map(|a| a.busy_end - a.decode_start).collect()
    }
}

/// How unfinished responses are harvested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutPolicy {
    /// Never cut.
    None,
    /// Each actor cuts its own stragglers once it reaches `tau`.
    PerActor,
    /// Once `tau` of all responses finish, everything left moves to one actor.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunMode {
    pub cut: CutPolicy,
    /// Bill every actor until the whole generation phase ends.
    pub hold_until_end: bool,
}

/// Elastic execution: per-actor cut-and-migrate and per-actor release.
pub fn run_step(plan: &GenerationPlan, placement: &PlacementPlan, actual: &StepRecord, profile: &LatencyProfile, cfg: &SimConfig) -> Result<SimResult> {
    run_with(plan, placement, actual, profile, cfg, RunMode { cut: CutPolicy::PerActor, hold_until_end: false })
}

/// Global cut-and-migrate over an unranked assignment.
pub fn baseline_global_cut(plan: &GenerationPlan, placement: &PlacementPlan, actual: &StepRecord, profile: &LatencyProfile, cfg: &SimConfig) -> Result<SimResult> {
    run_with(plan, placement, actual, profile, cfg, RunMode { cut: CutPolicy::Global, hold_until_end: false })
}

/// Fixed allocation: no cuts, all actors held for the whole phase.
pub fn baseline_static(plan: &GenerationPlan, placement: &PlacementPlan, actual: &StepRecord, profile: &LatencyProfile, cfg: &SimConfig) -> Result<SimResult> {
    run_with(plan, placement, actual, profile, cfg, RunMode { cut: CutPolicy::None, hold_until_end: true })
}

pub fn run_with(
    plan: &GenerationPlan,
    placement: &PlacementPlan,
    actual: &StepRecord,
    profile: &LatencyProfile,
    cfg: &SimConfig,
    mode: RunMode,
) -> Result<SimResult> {
    cfg.validate()?;
    Engine::new(plan, placement, actual, profile, cfg, mode)?.run()
}

#[derive(Clone, Copy, Debug)]
struct Time(f64);

impl PartialEq for Time {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Time {}
impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Start(ActorId),
    TickEnd { actor: ActorId, epoch: u64 },
    Arrival { actor: ActorId, resp: usize },
}

struct Resp {
    prompt_id: PromptId,
    response_idx: usize,
    prompt_len: i64,
    actual: i64,
    origin: ActorId,
    /// Current actor and tick offset: generated = actor.ticks - base.
    at: Option<(ActorId, i64)>,
    /// Tokens at the last hand-off; valid while in flight or finished.
    generated: i64,
    migrated: bool,
    finished: Option<(f64, ActorId)>,
}

#[derive(Default)]
struct Actor {
    gpu_count: u32,
    invoke: f64,
    decode_start: f64,
    busy_end: Option<f64>,
    assigned: Vec<usize>,
    running: bool,
    ticking: bool,
    epoch: u64,
    ticks: i64,
    live: usize,
    /// (finish tick, response); stale entries skipped on pop.
    finishing: BinaryHeap<Reverse<(i64, usize)>>,
    /// Multiset of prompt_len - base; context = max key + ticks.
    context_keys: BTreeMap<i64, usize>,
    completed_local: usize,
    triggered: bool,
    cut_queue: Vec<usize>,
    inbound: usize,
    arrived: Vec<usize>,
    migrated_out: usize,
    migrated_in: usize,
}

impl Actor {
    fn free_slots(&self) -> usize {
        self.assigned.len().saturating_sub(self.live + self.inbound)
    }
}

struct Engine<'a> {
    profile: &'a LatencyProfile,
    placement: &'a PlacementPlan,
    cfg: &'a SimConfig,
    mode: RunMode,
    step_idx: u64,
    resps: Vec<Resp>,
    actors: Vec<Actor>,
    queue: BinaryHeap<Reverse<(Time, u64, Pending)>>,
    seq: u64,
    events: Vec<Event>,
    completed: usize,
    global_cut_done: bool,
    cuts: usize,
    transfer_seconds: f64,
    prefill: Option<PrefillInterval>,
    prefill_tokens: u64,
    trie_node_count: u64,
}

impl<'a> Engine<'a> {
    fn new(
        plan: &'a GenerationPlan,
        placement: &'a PlacementPlan,
        actual: &'a StepRecord,
        profile: &'a LatencyProfile,
        cfg: &'a SimConfig,
        mode: RunMode,
    ) -> Result<Self> {
        validate_inputs(plan, placement, actual)?;
        let mut resps = Vec::new();
        let mut actors: Vec<Actor> = Vec::with_capacity(plan.groups.len());
        for group in &plan.groups {
            let mut actor = Actor {
                gpu_count: group.gpu_count,
                ..Actor::default()
            };
            for m in &group.members {
                for (k, &len) in actual.actual_lengths[&m.prompt_id].iter().enumerate() {
                    actor.assigned.push(resps.len());
                    resps.push(Resp {
                        prompt_id: m.prompt_id.clone(),
                        response_idx: k,
                        prompt_len: m.prompt_len as i64,
                        actual: len as i64,
                        origin: group.actor_id,
                        at: None,
                        generated: 0,
                        migrated: false,
                        finished: None,
                    });
                }
            }
            actors.push(actor);
        }
        Ok(Engine {
            profile,
            placement,
            cfg,
            mode,
            step_idx: plan.step_idx,
            resps,
            actors,
            queue: BinaryHeap::new(),
            seq: 0,
            events: Vec::new(),
            completed: 0,
            global_cut_done: false,
            cuts: 0,
            transfer_seconds: 0.0,
            prefill: None,
            prefill_tokens: 0,
            trie_node_count: plan.prefill.trie_node_count(),
        }
        .launch(plan))
    }

    fn push(&mut self, t: f64, p: Pending) {
        self.queue.push(Reverse((Time(t), self.seq, p)));
        self.seq += 1;
    }

    fn log(&mut self, t: f64, event: EventKind, actor: Option<ActorId>) -> &mut Event {
        self.events.push(Event {
            t,
            event,
            actor,
            prompt_id: None,
            response_idx: None,
            tokens: None,
            to: None,
            gpus: None,
        });
        self.events.last_mut().expect("just pushed")
    }

    fn log_resp(&mut self, t: f64, event: EventKind, actor: ActorId, r: usize, tokens: i64) -> &mut Event {
        let (prompt_id, response_idx) = (self.resps[r].prompt_id.clone(), self.resps[r].response_idx);
        let e = self.log(t, event, Some(actor));
        e.prompt_id = Some(prompt_id);
        e.response_idx = Some(response_idx);
        e.tokens = Some(tokens as u64);
        e
    }

    /// Invocation and decode start of every actor.
    fn launch(mut self, plan: &GenerationPlan) -> Self {
        let g = plan.responses_per_prompt as u64;
        match &plan.prefill {
            PrefillPlan::Deduplicated(report) => {
                let end: f64 = report.waves.iter().map(|&w| self.profile.prefill_time(w)).sum();
                self.prefill_tokens = report.waves.iter().sum();
                let gpus = self.placement.prefill_gpus.len() as u32;
                self.prefill = Some(PrefillInterval { gpu_count: gpus, start: 0.0, end });
                self.log(0.0, EventKind::Invoke, None).gpus = Some(gpus);
                self.log(end, EventKind::Release, None).gpus = Some(gpus);
                for a in 0..self.actors.len() {
                    let p = self.placement.actor(a);
                    let kv_ready = end + p.l_kv;
                    let invoke = (kv_ready - p.l_model).max(0.0);
                    let start = (invoke + p.l_model).max(kv_ready);
                    self.schedule_start(a, invoke, start);
                }
            }
            PrefillPlan::PerActor { .. } => {
                for (a, group) in plan.groups.iter().enumerate() {
                    let tokens: u64 = group.members.iter().map(|m| m.prompt_len as u64 * g).sum();
                    self.prefill_tokens += tokens;
                    let start = self.placement.actor(a).l_model + self.profile.prefill_time(tokens);
                    self.schedule_start(a, 0.0, start);
                }
            }
        }
        self
    }

    fn schedule_start(&mut self, a: ActorId, invoke: f64, start: f64) {
        self.actors[a].invoke = invoke;
        self.actors[a].decode_start = start;
        let gpus = self.actors[a].gpu_count;
        self.log(invoke, EventKind::Invoke, Some(a)).gpus = Some(gpus);
        self.push(start, Pending::Start(a));
    }

    fn run(mut self) -> Result<SimResult> {
        while let Some(Reverse((Time(t), _, p))) = self.queue.pop() {
            match p {
                Pending::Start(a) => self.on_start(t, a),
                Pending::TickEnd { actor, epoch } if epoch == self.actors[actor].epoch => self.on_tick_end(t, actor),
                Pending::TickEnd { .. } => {}
                Pending::Arrival { actor, resp } => self.on_arrival(t, actor, resp),
            }
        }
        self.finish()
    }

    fn join(&mut self, a: ActorId, r: usize, generated: i64) {
        let actor = &mut self.actors[a];
        let base = actor.ticks - generated;
        let resp = &mut self.resps[r];
        resp.at = Some((a, base));
        actor.live += 1;
        actor.finishing.push(Reverse((base + resp.actual, r)));
        *actor.context_keys.entry(resp.prompt_len - base).or_insert(0) += 1;
    }

    /// Takes a live response off its actor, returning tokens generated so far.
    fn detach(&mut self, r: usize) -> i64 {
        let (a, base) = self.resps[r].at.take().expect("response is live");
        let actor = &mut self.actors[a];
        actor.live -= 1;
        let key = self.resps[r].prompt_len - base;
        let n = actor.context_keys.get_mut(&key).expect("context key present");
        *n -= 1;
        if *n == 0 {
            actor.context_keys.remove(&key);
        }
        let generated = actor.ticks - base;
        self.resps[r].generated = generated;
        generated
    }

    fn on_start(&mut self, t: f64, a: ActorId) {
        if self.actors[a].busy_end.is_some() {
            return;
        }
        self.actors[a].running = true;
        self.log(t, EventKind::Start, Some(a));
        let assigned = std::mem::take(&mut self.actors[a].assigned);
        for &r in &assigned {
            // a global cut may already have moved responses of an actor that had not started
            if self.resps[r].at.is_none() && !self.resps[r].migrated {
                self.join(a, r, 0);
            }
        }
        self.actors[a].assigned = assigned;
        self.advance(t, a);
    }

    fn on_arrival(&mut self, t: f64, a: ActorId, r: usize) {
        let generated = self.resps[r].generated;
        self.log_resp(t, EventKind::Arrive, a, r, generated);
        let actor = &mut self.actors[a];
        actor.inbound -= 1;
        actor.migrated_in += 1;
        actor.arrived.push(r);
        if !actor.ticking {
            self.admit_arrivals(a);
            self.advance(t, a);
        }
    }

    fn admit_arrivals(&mut self, a: ActorId) {
        for r in std::mem::take(&mut self.actors[a].arrived) {
            let generated = self.resps[r].generated;
            self.join(a, r, generated);
        }
    }

    fn on_tick_end(&mut self, t: f64, a: ActorId) {
        self.actors[a].ticking = false;
        self.actors[a].ticks += 1;
        let ticks = self.actors[a].ticks;
        while let Some(&Reverse((tick, r))) = self.actors[a].finishing.peek() {
            if tick > ticks {
                break;
            }
            self.actors[a].finishing.pop();
            if !matches!(self.resps[r].at, Some((at, base)) if at == a && base + self.resps[r].actual == tick) {
                continue;
            }
            let generated = self.detach(r);
            debug_assert_eq!(generated, self.resps[r].actual);
            self.resps[r].finished = Some((t, a));
            self.completed += 1;
            if self.resps[r].origin == a && !self.resps[r].migrated {
                self.actors[a].completed_local += 1;
            }
            self.log_resp(t, EventKind::Finish, a, r, generated);
        }
        self.admit_arrivals(a);
        match self.mode.cut {
            CutPolicy::None => {}
            CutPolicy::PerActor => self.per_actor_cut(t, a),
            CutPolicy::Global => self.global_cut(t),
        }
        if self.actors[a].running {
            self.advance(t, a);
        }
    }

    /// Schedules the next tick, or releases the actor when it has nothing left.
    fn advance(&mut self, t: f64, a: ActorId) {
        let actor = &mut self.actors[a];
        if actor.live == 0 {
            if actor.inbound == 0 && actor.arrived.is_empty() {
                self.release(t, a);
            }
            return;
        }
        let (&key, _) = actor.context_keys.last_key_value().expect("live responses have keys");
        let context = (key + actor.ticks) as f64;
        let dt = self.profile.tpot.tpot(actor.live as f64, context);
        actor.ticking = true;
        let epoch = actor.epoch;
        self.push(t + dt, Pending::TickEnd { actor: a, epoch });
    }

    fn release(&mut self, t: f64, a: ActorId) {
        let actor = &mut self.actors[a];
        actor.running = false;
        actor.ticking = false;
        actor.epoch += 1;
        actor.busy_end = Some(t);
    }

    fn migration_enabled(&self) -> bool {
        self.cfg.migration_bytes_per_token.is_finite()
    }

    fn transfer_delay(&self, r: usize, from: ActorId, to: ActorId) -> f64 {
        let tokens = (self.resps[r].prompt_len + self.resps[r].generated) as f64;
        tokens * self.cfg.migration_bytes_per_token / self.placement.actor_bandwidth[from][to]
    }

    fn send(&mut self, t: f64, r: usize, from: ActorId, to: ActorId) {
        let generated = self.detach(r);
        self.resps[r].migrated = true;
        let delay = self.transfer_delay(r, from, to);
        self.cuts += 1;
        self.transfer_seconds += delay;
        self.actors[from].migrated_out += 1;
        self.actors[to].inbound += 1;
        self.log_resp(t, EventKind::Migrate, from, r, generated).to = Some(to);
        self.push(t + delay, Pending::Arrival { actor: to, resp: r });
    }

    fn per_actor_cut(&mut self, t: f64, a: ActorId) {
        let actor = &self.actors[a];
        if !actor.triggered && actor.completed_local as f64 >= self.cfg.tau * actor.assigned.len() as f64 {
            let stragglers: Vec<usize> = actor
                .assigned
                .iter()
                .copied()
                .filter(|&r| matches!(self.resps[r].at, Some((at, _)) if at == a))
                .collect();
            self.actors[a].triggered = true;
            for &r in &stragglers {
                let generated = self.actors[a].ticks - self.resps[r].at.expect("live").1;
                self.log_resp(t, EventKind::Cut, a, r, generated);
            }
            self.actors[a].cut_queue = stragglers;
        }
        if !self.migration_enabled() || self.actors[a].cut_queue.is_empty() {
            return;
        }
        let queue = std::mem::take(&mut self.actors[a].cut_queue);
        let mut rest = Vec::new();
        for r in queue {
            if !matches!(self.resps[r].at, Some((at, _)) if at == a) {
                continue;
            }
            if rest.is_empty() {
                if let Some(to) = self.destination(a) {
                    self.send(t, r, a, to);
                    continue;
                }
            }
            rest.push(r);
        }
        self.actors[a].cut_queue = rest;
    }

    /// Running, untriggered actor other than `from` with the most free slots.
    fn destination(&self, from: ActorId) -> Option<ActorId> {
        self.actors
            .iter()
            .enumerate()
            .filter(|&(b, actor)| b != from && actor.running && !actor.triggered)
            .map(|(b, actor)| (actor.free_slots(), b))
            .filter(|&(free, _)| free > 0)
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)))
            .map(|(_, b)| b)
    }

    fn global_cut(&mut self, t: f64) {
        let total = self.resps.len();
        if self.global_cut_done || (self.completed as f64) < self.cfg.tau * total as f64 || !self.migration_enabled() {
            return;
        }
        self.global_cut_done = true;
        let Some(target) = (0..self.actors.len()).find(|&b| self.actors[b].running) else {
            return;
        };
        for a in 0..self.actors.len() {
            if a == target || self.actors[a].busy_end.is_some() {
                continue;
            }
            let moving: Vec<usize> = if self.actors[a].running {
                self.actors[a]
                    .assigned
                    .iter()
                    .chain(self.actors[a].arrived.iter())
                    .copied()
                    .filter(|&r| matches!(self.resps[r].at, Some((at, _)) if at == a))
                    .collect()
            } else {
                // not started yet: nothing generated
                self.actors[a].assigned.clone()
            };
            for &r in &moving {
                if self.resps[r].at.is_none() {
                    self.join(a, r, 0);
                }
                let generated = self.actors[a].ticks - self.resps[r].at.expect("live").1;
                self.log_resp(t, EventKind::Cut, a, r, generated);
                self.send(t, r, a, target);
            }
            if self.actors[a].live == 0 && self.actors[a].inbound == 0 {
                self.release(t, a);
            }
        }
    }

    fn finish(self) -> Result<SimResult> {
        let mut events = self.events;
        let prefill_end = self.prefill.as_ref().map_or(0.0, |p| p.end);
        let busy_ends: Vec<f64> = self
            .actors
            .iter()
            .map(|a| a.busy_end.expect("every actor drains its queue"))
            .collect();
        let generation_time = busy_ends.iter().copied().fold(prefill_end, f64::max);

        let mut actors = Vec::with_capacity(self.actors.len());
        for (id, (a, &busy_end)) in self.actors.iter().zip(&busy_ends).enumerate() {
            let release = if self.mode.hold_until_end { generation_time } else { busy_end };
            events.push(Event {
                t: release,
                event: EventKind::Release,
                actor: Some(id),
                prompt_id: None,
                response_idx: None,
                tokens: None,
                to: None,
                gpus: Some(a.gpu_count),
            });
            actors.push(ActorInterval {
                actor_id: id,
                gpu_count: a.gpu_count,
                invoke: a.invoke,
                decode_start: a.decode_start,
                busy_end,
                release,
                assigned: a.assigned.len(),
                migrated_out: a.migrated_out,
                migrated_in: a.migrated_in,
            });
        }
        // stable: ties keep prefill first, then actors by id
        events.sort_by(|x, y| x.t.total_cmp(&y.t));

        let gpu_seconds = billed_gpu_seconds(self.prefill.as_ref(), &actors);
        let responses = self
            .resps
            .iter()
            .map(|r| {
                let (finished_at, finished_on) = r.finished.expect("every response finishes");
                ResponseOutcome {
                    prompt_id: r.prompt_id.clone(),
                    response_idx: r.response_idx,
                    actual_len: r.actual as u64,
                    generated: r.generated as u64,
                    finished_at,
                    finished_on,
                    migrated: r.migrated,
                }
            })
            .collect();
        Ok(SimResult {
            step_idx: self.step_idx,
            wall_time: generation_time + self.cfg.prep_seconds + self.cfg.learn_seconds,
            generation_time,
            prefill: self.prefill,
            actors,
            gpu_seconds,
            dollars: self.profile.rho * gpu_seconds,
            cuts: self.cuts,
            migrations: self.cuts,
            transfer_seconds: self.transfer_seconds,
            redundant_prefill_tokens: self.prefill_tokens.saturating_sub(self.trie_node_count),
            prefill_tokens: self.prefill_tokens,
            responses,
            events,
        })
    }
}

/// Prefill interval first, then decode actors by id.
pub fn billed_gpu_seconds(prefill: Option<&PrefillInterval>, actors: &[ActorInterval]) -> f64 {
    let mut total = 0.0;
    if let Some(p) = prefill {
        total += (p.end - p.start) * p.gpu_count as f64;
    }
    for a in actors {
        total += (a.release - a.invoke) * a.gpu_count as f64;
    }
    total
}

fn validate_inputs(plan: &GenerationPlan, placement: &PlacementPlan, actual: &StepRecord) -> Result<()> {
    if placement.actors.len() != plan.groups.len() {
        return Err(Error::Validation(format!(
            "placement covers {} actors, plan has {}",
            placement.actors.len(),
            plan.groups.len()
        )));
    }
    let mut seen = 0;
    for m in plan.groups.iter().flat_map(|g| &g.members) {
        let Some(lengths) = actual.actual_lengths.get(&m.prompt_id) else {
            return Err(Error::Validation(format!("prompt {} is planned but not in step {}", m.prompt_id, actual.step_idx)));
        };
        if lengths.len() != plan.responses_per_prompt {
            return Err(Error::Validation(format!(
                "prompt {} has {} responses, plan expects {}",
                m.prompt_id,
                lengths.len(),
                plan.responses_per_prompt
            )));
        }
        seen += 1;
    }
    if seen != actual.actual_lengths.len() {
        return Err(Error::Validation(format!(
            "step {} schedules {} prompts, plan covers {}",
            actual.step_idx,
            actual.actual_lengths.len(),
            seen
        )));
    }
    Ok(())
}
