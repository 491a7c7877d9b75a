//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rolloutsim::placement::{ActorPlacement, PlacementPlan};
use rolloutsim::planner::{ActorGroup, GenerationPlan, PlannedPrompt, PrefillPlan};
use rolloutsim::profile::LatencyProfile;
use rolloutsim::workload::{Prompt, PromptId, StepRecord};

/// Distinct length-`l` prefixes by pairwise comparison; a prompt shorter
/// than `l` stands for itself.
pub fn oracle_unique_prefixes(prompts: &[Vec<u32>], l: usize) -> usize {
    let key = |p: &Vec<u32>| (p.len().min(l), p.len() < l);
    (0..prompts.len())
        .filter(|&i| {
            !(0..i).any(|j| {
                let (a, b) = (&prompts[i], &prompts[j]);
                key(a) == key(b) && a[..a.len().min(l)] == b[..b.len().min(l)]
            })
        })
        .count()
}

/// Largest length in `[l_min, l_max]` whose distinct-prefix count fits, else `l_min`.
pub fn oracle_prefix_length(prompts: &[Vec<u32>], b_prefill: usize, l_min: usize, l_max: usize) -> (usize, bool) {
    let mut best = None;
    for l in l_min..=l_max {
        if oracle_unique_prefixes(prompts, l) <= b_prefill {
            best = Some(l);
        }
    }
    match best {
        Some(l) => (l, false),
        None => (l_min, true),
    }
}

/// Minimum of `sum_i max(group_i)` over all splits of `values` into `n`
/// groups whose sizes differ by at most one.
pub fn oracle_min_sum_of_max(values: &[f64], n: usize) -> f64 {
    let q = values.len() / n;
    let r = values.len() % n;
    let mut best = f64::INFINITY;
    let mut sizes = vec![0usize; n];
    let mut maxes = vec![f64::NEG_INFINITY; n];
    fn go(i: usize, values: &[f64], q: usize, r: usize, sizes: &mut [usize], maxes: &mut [f64], best: &mut f64) {
        if i == values.len() {
            let big = sizes.iter().filter(|&&s| s == q + 1).count();
            if big == r && sizes.iter().all(|&s| s == q || s == q + 1) {
                let total: f64 = maxes.iter().map(|&m| if m.is_finite() { m } else { 0.0 }).sum();
                *best = best.min(total);
            }
            return;
        }
        for g in 0..sizes.len() {
            if sizes[g] > q {
                continue;
            }
            let prev = maxes[g];
            sizes[g] += 1;
            maxes[g] = prev.max(values[i]);
            go(i + 1, values, q, r, sizes, maxes, best);
            sizes[g] -= 1;
            maxes[g] = prev;
        }
    }
    go(0, values, q, r, &mut sizes, &mut maxes, &mut best);
    best
}

/// Token-by-token decode time: at tick `k` the live batch is every response
/// with more than `k` planned tokens, and the context is `k` plus the
/// longest live prompt.
pub fn oracle_actor_time(members: &[(u64, usize)], g: usize, profile: &LatencyProfile) -> f64 {
    let longest = members.iter().map(|m| m.0).max().unwrap_or(0);
    let mut total = 0.0;
    for k in 0..longest {
        let live: Vec<&(u64, usize)> = members.iter().filter(|m| m.0 > k).collect();
        let context = k as usize + live.iter().map(|m| m.1).max().unwrap();
        total += profile.tpot(live.len() * g, context);
    }
    total
}

pub fn planned(pred: f64) -> u64 {
    pred.round().max(1.0) as u64
}

/// Builds a one-step plan, zero-latency placement and matching actuals.
pub struct Instance {
    pub plan: GenerationPlan,
    pub placement: PlacementPlan,
    pub actual: StepRecord,
}

/// `actors[a]` lists `(prompt_len, predicted, actual lengths)` per prompt.
pub fn instance(actors: &[Vec<(usize, f64, Vec<u32>)>], profile: &LatencyProfile, bandwidth: f64, tau: f64) -> Instance {
    let g = actors.iter().flatten().next().map_or(1, |m| m.2.len());
    let mut lengths = BTreeMap::new();
    let mut groups = Vec::new();
    let mut next = 0;
    for (actor_id, members) in actors.iter().enumerate() {
        let members = members
            .iter()
            .map(|(prompt_len, predicted, actual)| {
                let id = PromptId::new(format!("q{next:04}"));
                next += 1;
                lengths.insert(id.clone(), actual.clone());
                PlannedPrompt {
                    prompt_id: id,
                    predicted_len: *predicted,
                    prompt_len: *prompt_len,
                }
            })
            .collect();
        groups.push(ActorGroup {
            actor_id,
            members,
            responses_per_prompt: g,
            gpu_count: profile.gpus_per_actor,
        });
    }
    let n = groups.len();
    let plan = GenerationPlan::from_groups(0, g, PrefillPlan::PerActor { trie_node_count: 0 }, groups, profile, tau);
    let placement = PlacementPlan {
        prefill_gpus: vec![0, 1],
        actors: (0..n)
            .map(|actor_id| ActorPlacement {
                actor_id,
                node: 0,
                gpus: vec![2 + 2 * actor_id, 3 + 2 * actor_id],
                l_model: 0.0,
                l_kv: 0.0,
                co_located: actor_id == 0,
            })
            .collect(),
        actor_bandwidth: vec![vec![bandwidth; n]; n],
        overlap_slack: Vec::new(),
    };
    Instance {
        plan,
        placement,
        actual: StepRecord::new(0, lengths),
    }
}

pub fn prompt(id: &str, tokens: Vec<u32>) -> Prompt {
    Prompt::new(id, tokens, 1)
}
