//! Multi-step runs: predict, plan, place and simulate each step, then feed
//! the observed lengths back into the predictor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{baseline_global_cut, baseline_static, run_step, SimConfig, SimResult};
use crate::dedup::{PrefillCapacity, PrefixIndex, PrefixReport};
use crate::error::{Error, Result};
use crate::placement::{kv_transfer_bytes, overlap_slacks, place_groups, ClusterTopology, PlacementPlan, TransferSizes};
use crate::planner::{
    round_robin, scale, scale_with, Feasibility, GenerationPlan, PlannedPrompt, PlanningBatch, PrefillPlan, ScaleOptions,
    DEFAULT_LAMBDA,
};
use crate::predictor::{LengthHistory, NoiseModel};
use crate::profile::LatencyProfile;
use crate::workload::{Prompt, PromptId, WorkloadTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Ranked assignment, deduplicated prefill, per-actor cut-and-migrate.
    Elastic,
    /// Fixed actor count, round-robin assignment, held for the whole phase.
    Static,
    /// Round-robin assignment over the ranked planner's actor count, with
    /// one global cut-and-migrate.
    GlobalCut,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Elastic, Strategy::Static, Strategy::GlobalCut];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Elastic => "elastic",
            Strategy::Static => "static",
            Strategy::GlobalCut => "global-cut",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (expected elastic, static or global-cut)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub sim: SimConfig,
    pub lambda: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Actor count of the static baseline.
    pub baseline_actors: usize,
    pub window: usize,
    pub alpha: f64,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Prompts the prefill actor takes per pass.
    pub b_prefill: usize,
    pub model_bytes: f64,
    pub kv_bytes_per_token: f64,
    /// Charge unhidden transfer time when choosing the actor count.
    pub overlap_penalty: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            sim: SimConfig::default(),
            lambda: DEFAULT_LAMBDA,
            n_min: 2,
            n_max: 6,
            baseline_actors: 3,
            window: 1,
            alpha: 0.5,
            noise: NoiseModel::Identity,
            seed: 0,
            b_prefill: 256,
            model_bytes: 6.0e9,
            kv_bytes_per_token: 36_864.0,
            overlap_penalty: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.noise.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::Config(format!("actor range [{}, {}] is empty", self.n_min, self.n_max)));
        }
        if self.baseline_actors == 0 {
            return Err(Error::Config("baseline actor count must be at least 1".into()));
        }
        if self.window == 0 || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "window must be >= 1 and alpha in (0, 1], got {} and {}",
                self.window, self.alpha
            )));
        }
        if self.b_prefill == 0 {
            return Err(Error::Config("B_prefill must be at least 1".into()));
        }
        if !(self.model_bytes >= 0.0 && self.kv_bytes_per_token >= 0.0) {
            return Err(Error::Config("transfer sizes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Wall time of each planning stage, seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanTimings {
    pub predict: f64,
    pub dedup: f64,
    pub scale: f64,
    pub place: f64,
    pub total: f64,
}

/// Per-step planning pipeline of one strategy.
pub struct StepPlanner<'a> {
    pub cfg: &'a TrainingConfig,
    pub profile: &'a LatencyProfile,
    pub topo: &'a ClusterTopology,
}

impl StepPlanner<'_> {
    fn scale_options(&self, batch_len: usize) -> ScaleOptions {
        ScaleOptions {
            n_min: self.cfg.n_min.min(batch_len),
            n_max: self.cfg.n_max.min(batch_len),
            lambda: self.cfg.lambda,
            tau: self.cfg.sim.tau,
        }
    }

    pub fn plan<R: rand::Rng + ?Sized>(
        &self,
        strategy: Strategy,
        step_idx: u64,
        prompts: &[&Prompt],
        responses_per_prompt: usize,
        history: &LengthHistory,
        rng: &mut R,
    ) -> Result<(GenerationPlan, PlacementPlan, PlanTimings)> {
        let clock = Instant::now();
        let mut timings = PlanTimings::default();
        let mut lap = {
            let mut last = Instant::now();
            move || {
                let now = Instant::now();
                let d = (now - last).as_secs_f64();
                last = now;
                d
            }
        };

        let batch = PlanningBatch {
            step_idx,
            prompts: prompts
                .iter()
                .map(|p| PlannedPrompt {
                    prompt_id: p.id.clone(),
                    predicted_len: history.predict_noisy(p, &self.cfg.noise, rng),
                    prompt_len: p.prompt_len(),
                })
                .collect(),
            responses_per_prompt,
        };
        timings.predict = lap();

        let index = PrefixIndex::build(prompts.iter().copied())?;
        let gpus = self.profile.gpus_per_actor;
        let (plan, placement) = match strategy {
            Strategy::Elastic => {
                let cap = PrefillCapacity::new(self.cfg.b_prefill, self.topo.learner_gpus.len() as u32)?;
                let report = PrefixReport::analyze(&index, &cap, responses_per_prompt)?;
                let l_star = report.choice.length;
                let l_prefill: f64 = report.waves.iter().map(|&w| self.profile.prefill_time(w)).sum();
                let lookup: BTreeMap<PromptId, &Prompt> = prompts.iter().map(|p| (p.id.clone(), *p)).collect();
                let sizes = |groups: &[_]| TransferSizes {
                    model_bytes: self.cfg.model_bytes,
                    kv_bytes: kv_transfer_bytes(groups, &lookup, l_star, self.cfg.kv_bytes_per_token),
                };
                timings.dedup = lap();

                let opts = self.scale_options(prompts.len());
                let penalty = self.cfg.overlap_penalty;
                let plan = scale_with(&batch, self.profile, &opts, PrefillPlan::Deduplicated(report), |groups, times| {
                    match place_groups(groups, times, self.topo, &sizes(groups)) {
                        Err(_) => Feasibility::Infeasible,
                        Ok(_) if !penalty => Feasibility::Ok { penalty: 0.0 },
                        Ok(pp) => Feasibility::Ok {
                            penalty: overlap_slacks(&pp, times, l_prefill)
                                .iter()
                                .map(|s| -s.slack)
                                .fold(0.0, f64::max),
                        },
                    }
                })?;
                timings.scale = lap();

                let mut pp = place_groups(&plan.groups, &plan.est_time_per_actor, self.topo, &sizes(&plan.groups))?;
                pp.record_overlap(overlap_slacks(&pp, &plan.est_time_per_actor, l_prefill));
                timings.place = lap();
                (plan, pp)
            }
            Strategy::Static | Strategy::GlobalCut => {
                let prefill = PrefillPlan::PerActor {
                    trie_node_count: index.trie_node_count(),
                };
                timings.dedup = lap();
                let n = match strategy {
                    Strategy::Static => self.cfg.baseline_actors.min(prompts.len()),
                    // same actor count the ranked planner picks, so only assignment and cut policy differ
                    _ => scale(&batch, self.profile, &self.scale_options(prompts.len()), prefill.clone())?.n_actors,
                };
                let groups = round_robin(&batch, n, gpus)?;
                let plan = GenerationPlan::from_groups(step_idx, responses_per_prompt, prefill, groups, self.profile, self.cfg.sim.tau);
                timings.scale = lap();
                let sizes = TransferSizes {
                    model_bytes: self.cfg.model_bytes,
                    kv_bytes: vec![0.0; plan.groups.len()],
                };
                let pp = place_groups(&plan.groups, &plan.est_time_per_actor, self.topo, &sizes)?;
                timings.place = lap();
                (plan, pp)
            }
        };
        timings.total = clock.elapsed().as_secs_f64();
        Ok((plan, placement, timings))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub plan: GenerationPlan,
    pub placement: PlacementPlan,
    pub result: SimResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub strategy: Strategy,
    pub steps: usize,
    pub mean_step_time: f64,
    pub mean_generation_time: f64,
    pub mean_gpu_seconds: f64,
    pub mean_cost: f64,
    pub total_gpu_seconds: f64,
    pub total_cost: f64,
    pub total_cuts: usize,
    pub total_migrations: usize,
    pub mean_actors: f64,
    pub total_redundant_prefill_tokens: u64,
}

impl TrainingSummary {
    pub fn from_steps(strategy: Strategy, steps: &[StepReport]) -> Self {
        let n = steps.len().max(1) as f64;
        let sum = |f: fn(&StepReport) -> f64| steps.iter().map(f).sum::<f64>();
        let total_gpu_seconds = sum(|s| s.result.gpu_seconds);
        let total_cost = sum(|s| s.result.dollars);
        TrainingSummary {
            strategy,
            steps: steps.len(),
            mean_step_time: sum(|s| s.result.wall_time) / n,
            mean_generation_time: sum(|s| s.result.generation_time) / n,
            mean_gpu_seconds: total_gpu_seconds / n,
            mean_cost: total_cost / n,
            total_gpu_seconds,
            total_cost,
            total_cuts: steps.iter().map(|s| s.result.cuts).sum(),
            total_migrations: steps.iter().map(|s| s.result.migrations).sum(),
            mean_actors: sum(|s| s.plan.n_actors as f64) / n,
            total_redundant_prefill_tokens: steps.iter().map(|s| s.result.redundant_prefill_tokens).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub summary: TrainingSummary,
    pub steps: Vec<StepReport>,
}

pub fn run_training(
    trace: &WorkloadTrace,
    strategy: Strategy,
    cfg: &TrainingConfig,
    profile: &LatencyProfile,
    topo: &ClusterTopology,
) -> Result<TrainingReport> {
    cfg.validate()?;
    profile.validate()?;
    topo.validate()?;
    let mut history = LengthHistory::new(cfg.window, cfg.alpha, trace.limits().max_response_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let planner = StepPlanner { cfg, profile, topo };
    let g = trace.responses_per_prompt();

    let mut steps = Vec::with_capacity(trace.steps().len());
    for record in trace.steps() {
        let prompts: Vec<&Prompt> = record
            .scheduled_prompts()
            .map(|id| trace.prompt(id).expect("trace validated"))
            .collect();
        let (plan, placement, _) = planner.plan(strategy, record.step_idx, &prompts, g, &history, &mut rng)?;
        let result = match strategy {
            Strategy::Elastic => run_step(&plan, &placement, record, profile, &cfg.sim)?,
            Strategy::Static => baseline_static(&plan, &placement, record, profile, &cfg.sim)?,
            Strategy::GlobalCut => baseline_global_cut(&plan, &placement, record, profile, &cfg.sim)?,
        };
        for (id, lengths) in &record.actual_lengths {
            history.observe(record.step_idx, id, lengths)?;
        }
        steps.push(StepReport { plan, placement, result });
    }
    Ok(TrainingReport {
        summary: TrainingSummary::from_steps(strategy, &steps),
        steps,
    })
}
