//! Per-step generation planning: rank prompts by predicted length, split
//! them across decode actors, and pick the actor count that minimises a
//! weighted sum of min-max normalised step time and decode cost.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dedup::PrefixReport;
use crate::error::{Error, Result};
use crate::profile::LatencyProfile;
use crate::workload::PromptId;

pub type ActorId = usize;

pub const DEFAULT_LAMBDA: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedPrompt {
    pub prompt_id: PromptId,
    pub predicted_len: f64,
    pub prompt_len: usize,
}

/// One step's batch with per-prompt length estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningBatch {
    pub step_idx: u64,
    pub prompts: Vec<PlannedPrompt>,
    pub responses_per_prompt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorGroup {
    pub actor_id: ActorId,
    pub members: Vec<PlannedPrompt>,
    pub responses_per_prompt: usize,
    pub gpu_count: u32,
}

impl ActorGroup {
    pub fn prompt_ids(&self) -> impl Iterator<Item = &PromptId> {
        self.members.iter().map(|m| &m.prompt_id)
    }

    pub fn response_count(&self) -> usize {
        self.members.len() * self.responses_per_prompt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrefillPlan {
    /// A dedicated prefill actor computes each distinct prefix once.
    Deduplicated(PrefixReport),
    /// Every decode actor prefills its own responses.
    PerActor {
        /// Distinct prompt tokens in the batch, the floor for any prefill.
        trie_node_count: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub n: usize,
    pub t_total: f64,
    /// Seconds added to `t_total` when placement cannot hide transfers.
    pub penalty: f64,
    pub cost: f64,
    pub t_norm: f64,
    pub c_norm: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub step_idx: u64,
    pub responses_per_prompt: usize,
    pub prefill: PrefillPlan,
    pub n_actors: usize,
    pub groups: Vec<ActorGroup>,
    pub est_time_per_actor: Vec<f64>,
    pub est_total_time: f64,
    pub est_cost: f64,
    pub lambda: f64,
    pub tau: f64,
    pub candidates: Vec<CandidateEval>,
}

impl PrefillPlan {
    pub fn trie_node_count(&self) -> u64 {
        match self {
            PrefillPlan::Deduplicated(r) => r.trie_node_count,
            PrefillPlan::PerActor { trie_node_count } => *trie_node_count,
        }
    }
}

impl GenerationPlan {
    /// Plan over fixed groups, e.g. a baseline assignment.
    pub fn from_groups(
        step_idx: u64,
        responses_per_prompt: usize,
        prefill: PrefillPlan,
        groups: Vec<ActorGroup>,
        profile: &LatencyProfile,
        tau: f64,
    ) -> Self {
        let est_time_per_actor: Vec<f64> = groups.iter().map(|g| estimate_actor_time(g, profile)).collect();
        GenerationPlan {
            step_idx,
            responses_per_prompt,
            prefill,
            n_actors: groups.len(),
            est_total_time: est_time_per_actor.iter().copied().fold(0.0, f64::max),
            est_cost: cost_of(&groups, &est_time_per_actor, profile),
            est_time_per_actor,
            groups,
            lambda: f64::NAN,
            tau,
            candidates: Vec::new(),
        }
    }

    pub fn prompt_count(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }
}

fn by_predicted_desc(a: &PlannedPrompt, b: &PlannedPrompt) -> Ordering {
    b.predicted_len
        .total_cmp(&a.predicted_len)
        .then_with(|| a.prompt_id.cmp(&b.prompt_id))
}

fn split_sorted(sorted: &[PlannedPrompt], n: usize, responses_per_prompt: usize, gpu_count: u32) -> Vec<ActorGroup> {
    let (q, r) = (sorted.len() / n, sorted.len() % n);
    let mut start = 0;
    (0..n)
        .map(|actor_id| {
            // larger groups first: keeps group maxima as late in the ranking as possible
            let size = q + usize::from(actor_id < r);
            let members = sorted[start..start + size].to_vec();
            start += size;
            ActorGroup {
                actor_id,
                members,
                responses_per_prompt,
                gpu_count,
            }
        })
        .collect()
}

fn check_actor_count(batch: &PlanningBatch, n: usize) -> Result<()> {
    if batch.prompts.is_empty() {
        return Err(Error::Argument("cannot assign an empty batch".into()));
    }
    if n == 0 || n > batch.prompts.len() {
        return Err(Error::Argument(format!(
            "actor count {n} must lie in [1, {}] so that no actor is empty",
            batch.prompts.len()
        )));
    }
    Ok(())
}

/// Ranking-based assignment: sort by predicted length (longest first, ties
/// by prompt id) and cut into `n` contiguous, balanced chunks.
pub fn assign(batch: &PlanningBatch, n: usize, gpu_count: u32) -> Result<Vec<ActorGroup>> {
    check_actor_count(batch, n)?;
    let mut sorted = batch.prompts.clone();
    sorted.sort_by(by_predicted_desc);
    Ok(split_sorted(&sorted, n, batch.responses_per_prompt, gpu_count))
}

/// Unranked assignment in batch order: prompt `k` goes to actor `k mod n`.
pub fn round_robin(batch: &PlanningBatch, n: usize, gpu_count: u32) -> Result<Vec<ActorGroup>> {
    check_actor_count(batch, n)?;
    let mut groups: Vec<ActorGroup> = (0..n)
        .map(|actor_id| ActorGroup {
            actor_id,
            members: Vec::new(),
            responses_per_prompt: batch.responses_per_prompt,
            gpu_count,
        })
        .collect();
    for (k, p) in batch.prompts.iter().enumerate() {
        groups[k % n].members.push(p.clone());
    }
    Ok(groups)
}

/// Planned token count of one response.
pub fn planned_tokens(predicted_len: f64) -> u64 {
    predicted_len.round().max(1.0) as u64
}

/// Decode time of a group, integrating TPOT tick by tick while the live
/// batch shrinks as shorter responses finish. Each prompt contributes
/// `responses_per_prompt` responses of its predicted length; the context at
/// tick `t` is `t` plus the longest prompt still live.
pub fn estimate_actor_time(group: &ActorGroup, profile: &LatencyProfile) -> f64 {
    // (tokens, prompt_len) ascending by tokens
    let mut members: Vec<(u64, usize)> = group
        .members
        .iter()
        .map(|m| (planned_tokens(m.predicted_len), m.prompt_len))
        .collect();
    if members.is_empty() || group.responses_per_prompt == 0 {
        return 0.0;
    }
    members.sort_unstable();
    let g = group.responses_per_prompt;

    // longest prompt among members[i..]
    let mut suffix_max = vec![0usize; members.len() + 1];
    for i in (0..members.len()).rev() {
        suffix_max[i] = suffix_max[i + 1].max(members[i].1);
    }

    let mut total = 0.0;
    let mut tick = 0u64;
    let mut i = 0;
    while i < members.len() {
        let live = (members.len() - i) * g;
        let end = members[i].0;
        if end > tick {
            total += profile
                .tpot
                .sum_over_context(live as f64, (tick as usize + suffix_max[i]) as f64, end - tick);
            tick = end;
        }
        while i < members.len() && members[i].0 == end {
            i += 1;
        }
    }
    total
}

fn cost_of(groups: &[ActorGroup], times: &[f64], profile: &LatencyProfile) -> f64 {
    profile.rho
        * groups
            .iter()
            .zip(times)
            .map(|(g, t)| t * g.gpu_count as f64)
            .sum::<f64>()
}

/// Decode cost in dollars: `rho * sum_i T_i * G_i`.
pub fn estimate_cost(groups: &[ActorGroup], profile: &LatencyProfile) -> f64 {
    let times: Vec<f64> = groups.iter().map(|g| estimate_actor_time(g, profile)).collect();
    cost_of(groups, &times, profile)
}

/// Min-max normalisation; a constant series maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Outcome of evaluating one candidate actor count.
pub enum Feasibility {
    Ok { penalty: f64 },
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct ScaleOptions {
    pub n_min: usize,
    pub n_max: usize,
    pub lambda: f64,
    pub tau: f64,
}

impl ScaleOptions {
    pub fn validate(&self, batch_len: usize) -> Result<()> {
        if self.n_min == 0 || self.n_min > self.n_max || self.n_max > batch_len {
            return Err(Error::Argument(format!(
                "actor range [{}, {}] must satisfy 1 <= N_min <= N_max <= {batch_len}",
                self.n_min, self.n_max
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Argument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Argument(format!("tau {} outside (0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Evaluate every `N` in range and keep the argmin of
/// `lambda * T~(N) + (1 - lambda) * C~(N)`, ties toward smaller `N`.
pub fn scale(batch: &PlanningBatch, profile: &LatencyProfile, opts: &ScaleOptions, prefill: PrefillPlan) -> Result<GenerationPlan> {
    scale_with(batch, profile, opts, prefill, |_, _| Feasibility::Ok { penalty: 0.0 })
}

/// [`scale`] with a per-candidate check; `check(groups, times)` may add a
/// time penalty or rule the candidate out.
pub fn scale_with<F>(batch: &PlanningBatch, profile: &LatencyProfile, opts: &ScaleOptions, prefill: PrefillPlan, mut check: F) -> Result<GenerationPlan>
where
    F: FnMut(&[ActorGroup], &[f64]) -> Feasibility,
{
    opts.validate(batch.prompts.len())?;
    let mut sorted = batch.prompts.clone();
    sorted.sort_by(by_predicted_desc);

    struct Candidate {
        groups: Vec<ActorGroup>,
        times: Vec<f64>,
        t_total: f64,
        penalty: f64,
        cost: f64,
    }
    let mut candidates = Vec::new();
    for n in opts.n_min..=opts.n_max {
        let groups = split_sorted(&sorted, n, batch.responses_per_prompt, profile.gpus_per_actor);
        let times: Vec<f64> = groups.iter().map(|g| estimate_actor_time(g, profile)).collect();
        let penalty = match check(&groups, &times) {
            Feasibility::Ok { penalty } => penalty.max(0.0),
            Feasibility::Infeasible => continue,
        };
        candidates.push(Candidate {
            t_total: times.iter().copied().fold(0.0, f64::max),
            cost: cost_of(&groups, &times, profile),
            groups,
            times,
            penalty,
        });
    }
    if candidates.is_empty() {
        return Err(Error::Argument(format!(
            "no feasible actor count in [{}, {}]",
            opts.n_min, opts.n_max
        )));
    }

    let t_norm = min_max_normalize(&candidates.iter().map(|c| c.t_total + c.penalty).collect::<Vec<_>>());
    let c_norm = min_max_normalize(&candidates.iter().map(|c| c.cost).collect::<Vec<_>>());
    let scores: Vec<f64> = t_norm
        .iter()
        .zip(&c_norm)
        .map(|(t, c)| opts.lambda * t + (1.0 - opts.lambda) * c)
        .collect();
    let best = (0..candidates.len())
        .reduce(|best, i| if scores[i] < scores[best] { i } else { best })
        .expect("non-empty");

    let evals = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| CandidateEval {
            n: c.groups.len(),
            t_total: c.t_total,
            penalty: c.penalty,
            cost: c.cost,
            t_norm: t_norm[i],
            c_norm: c_norm[i],
            score: scores[i],
        })
        .collect();
    let chosen = candidates.swap_remove(best);
    Ok(GenerationPlan {
        step_idx: batch.step_idx,
        responses_per_prompt: batch.responses_per_prompt,
        prefill,
        n_actors: chosen.groups.len(),
        groups: chosen.groups,
        est_time_per_actor: chosen.times,
        est_total_time: chosen.t_total,
        est_cost: chosen.cost,
        lambda: opts.lambda,
        tau: opts.tau,
        candidates: evals,
    })
}
