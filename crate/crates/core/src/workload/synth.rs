//! Seeded synthetic traces.
//!
//! Per prompt: a base mean length drawn from [`LengthDistribution`], a linear
//! per-epoch trend whose slope comes from an increasing/decreasing mixture,
//! truncated zero-mean per-epoch noise, and fixed per-response offsets (the
//! spread among the `G` samples of one prompt). With drift disabled every
//! response length is constant across steps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{Prompt, PromptId, StepRecord, TraceLimits, WorkloadTrace};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    LogNormal { median: f64, sigma: f64 },
    Uniform { min: f64, max: f64 },
}

impl Default for LengthDistribution {
    fn default() -> Self {
        LengthDistribution::LogNormal {
            median: 350.0,
            sigma: 0.55,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    /// Largest per-epoch trend magnitude, tokens/epoch.
    pub slope_max: f64,
    /// Share of prompts whose trend is increasing.
    pub increasing_fraction: f64,
    pub noise_std: f64,
    /// Noise is resampled until it lies within `±noise_bound`.
    pub noise_bound: f64,
}

impl DriftConfig {
    pub fn none() -> Self {
        DriftConfig {
            slope_max: 0.0,
            increasing_fraction: 0.5,
            noise_std: 0.0,
            noise_bound: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slope_max == 0.0 && self.noise_std == 0.0
    }
}

impl Default for DriftConfig {
    /// Calibrated so that roughly 80% of per-prompt epoch-to-epoch changes
    /// stay within 50 tokens and about 99% within 100.
    fn default() -> Self {
        DriftConfig {
            slope_max: 12.0,
            increasing_fraction: 0.6,
            noise_std: 28.0,
            noise_bound: 70.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefixSharing {
    /// Fraction of prompts that start with the common prefix.
    pub fraction: f64,
    pub prefix_len: usize,
}

impl Default for PrefixSharing {
    fn default() -> Self {
        PrefixSharing {
            fraction: 0.5,
            prefix_len: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub prompts: usize,
    pub steps: usize,
    /// Prompts per step; must divide `prompts`. `None` schedules every prompt
    /// in every step, so each step is one epoch.
    pub batch_size: Option<usize>,
    pub responses_per_prompt: usize,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub vocab_size: u32,
    pub lengths: LengthDistribution,
    pub drift: DriftConfig,
    /// When set, generation fails unless consecutive-epoch changes of the
    /// per-prompt mean satisfy P(|d| <= 50) >= 0.70 and P(|d| <= 100) >= 0.90.
    pub calibrated_drift: bool,
    /// Std of the fixed per-response offset, relative to the prompt's base length.
    pub response_spread: f64,
    /// Relative std of the reference-answer length around the epoch-0 mean; 0 is exact.
    pub ground_truth_noise: f64,
    pub prefix_sharing: PrefixSharing,
    pub limits: TraceLimits,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            prompts: 64,
            steps: 3,
            batch_size: None,
            responses_per_prompt: 4,
            prompt_len_min: 32,
            prompt_len_max: 256,
            vocab_size: 32_000,
            lengths: LengthDistribution::default(),
            drift: DriftConfig::default(),
            calibrated_drift: true,
            response_spread: 0.35,
            ground_truth_noise: 0.3,
            prefix_sharing: PrefixSharing::default(),
            limits: TraceLimits::default(),
        }
    }
}

impl SynthConfig {
    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or(self.prompts)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.prompts / self.batch().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.prompts == 0 || self.steps == 0 || self.responses_per_prompt == 0 {
            return bad("prompts, steps and responses_per_prompt must be positive".into());
        }
        let batch = self.batch();
        if batch == 0 || batch > self.prompts || !self.prompts.is_multiple_of(batch) {
            return bad(format!("batch_size {batch} must divide the prompt count {}", self.prompts));
        }
        if self.prompt_len_min == 0
            || self.prompt_len_min > self.prompt_len_max
            || self.prompt_len_max > self.limits.max_prompt_len
        {
            return bad(format!(
                "prompt length range [{}, {}] must lie within [1, {}]",
                self.prompt_len_min, self.prompt_len_max, self.limits.max_prompt_len
            ));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        match self.lengths {
            LengthDistribution::LogNormal { median, sigma } if median > 0.0 && sigma >= 0.0 => {}
            LengthDistribution::Uniform { min, max } if min >= 1.0 && min <= max => {}
            ref other => return bad(format!("invalid length distribution {other:?}")),
        }
        let d = &self.drift;
        if !(0.0..=1.0).contains(&d.increasing_fraction) {
            return bad("drift.increasing_fraction must lie in [0, 1]".into());
        }
        if d.slope_max < 0.0 || d.noise_std < 0.0 || d.noise_bound < 0.0 {
            return bad("drift parameters must be non-negative".into());
        }
        if d.noise_std > 0.0 && d.noise_bound <= 0.0 {
            return bad("drift.noise_bound must be positive when noise_std is".into());
        }
        if self.calibrated_drift && d.slope_max > 50.0 {
            return bad(format!(
                "drift.slope_max {} alone moves every increasing prompt by more than 50 tokens per epoch",
                d.slope_max
            ));
        }
        if self.response_spread < 0.0 || self.ground_truth_noise < 0.0 {
            return bad("response_spread and ground_truth_noise must be non-negative".into());
        }
        let s = &self.prefix_sharing;
        if !(0.0..=1.0).contains(&s.fraction) {
            return bad("prefix_sharing.fraction must lie in [0, 1]".into());
        }
        if s.fraction > 0.0 && s.prefix_len >= self.prompt_len_max {
            return bad(format!(
                "shared prefix length {} leaves no room below prompt_len_max {}",
                s.prefix_len, self.prompt_len_max
            ));
        }
        Ok(())
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, bound: f64) -> f64 {
    if std == 0.0 || bound == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("std is positive");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= bound {
            return x;
        }
    }
}

struct PromptModel {
    base: f64,
    slope: f64,
    offsets: Vec<f64>,
}

/// Fewer deltas than this are too noisy to hold against the targets.
const MIN_CALIBRATION_SAMPLES: usize = 100;

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<WorkloadTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = cfg.limits.max_response_len as f64;
    let clamp_len = |x: f64| x.round().clamp(1.0, max_len) as u32;

    let shared_prefix: Vec<u32> = (0..cfg.prefix_sharing.prefix_len)
        .map(|_| rng.random_range(0..cfg.vocab_size))
        .collect();
    let shared_count = (cfg.prefix_sharing.fraction * cfg.prompts as f64).round() as usize;
    let mut sharing: Vec<bool> = (0..cfg.prompts).map(|i| i < shared_count).collect();
    sharing.shuffle(&mut rng);

    let log_normal = match cfg.lengths {
        LengthDistribution::LogNormal { median, sigma } => Some(LogNormal::new(median.ln(), sigma).map_err(|e| Error::Config(e.to_string()))?),
        LengthDistribution::Uniform { .. } => None,
    };

    let mut prompts = Vec::with_capacity(cfg.prompts);
    let mut models = Vec::with_capacity(cfg.prompts);
    for (i, &shares) in sharing.iter().enumerate() {
        let mut len = rng.random_range(cfg.prompt_len_min..=cfg.prompt_len_max);
        let mut tokens = Vec::with_capacity(len);
        if shares {
            len = len.max(shared_prefix.len() + 1);
            tokens.extend_from_slice(&shared_prefix);
        }
        while tokens.len() < len {
            tokens.push(rng.random_range(0..cfg.vocab_size));
        }

        let base = match (&cfg.lengths, &log_normal) {
            (_, Some(d)) => d.sample(&mut rng),
            (LengthDistribution::Uniform { min, max }, None) => rng.random_range(*min..=*max),
            _ => unreachable!(),
        }
        .clamp(1.0, max_len);
        let slope = if cfg.drift.slope_max > 0.0 {
            let magnitude = rng.random_range(0.0..=cfg.drift.slope_max);
            if rng.random_bool(cfg.drift.increasing_fraction) {
                magnitude
            } else {
                -magnitude
            }
        } else {
            0.0
        };
        let spread = cfg.response_spread * base;
        let offsets = (0..cfg.responses_per_prompt)
            .map(|_| truncated_normal(&mut rng, spread, 2.0 * spread))
            .collect();
        let gt_factor = 1.0 + truncated_normal(&mut rng, cfg.ground_truth_noise, 2.0 * cfg.ground_truth_noise);
        // exact ground truth equals the epoch-0 mean when responses do not spread
        let ground_truth_len = clamp_len(base * gt_factor);

        prompts.push(Prompt::new(format!("p{i:05}"), tokens, ground_truth_len));
        models.push(PromptModel { base, slope, offsets });
    }

    let steps_per_epoch = cfg.steps_per_epoch();
    let epochs = cfg.steps.div_ceil(steps_per_epoch);
    let batch = cfg.batch();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..cfg.prompts).collect();
    let mut center = vec![0.0; cfg.prompts];
    for epoch in 0..epochs {
        for (p, m) in models.iter().enumerate() {
            let noise = truncated_normal(&mut rng, cfg.drift.noise_std, cfg.drift.noise_bound);
            center[p] = m.base + m.slope * epoch as f64 + noise;
        }
        if batch < cfg.prompts {
            order.shuffle(&mut rng);
        }
        for k in 0..steps_per_epoch {
            let step_idx = epoch * steps_per_epoch + k;
            if step_idx >= cfg.steps {
                break;
            }
            let lengths: BTreeMap<PromptId, Vec<u32>> = order[k * batch..(k + 1) * batch]
                .iter()
                .map(|&p| {
                    let responses = models[p].offsets.iter().map(|o| clamp_len(center[p] + o)).collect();
                    (prompts[p].id.clone(), responses)
                })
                .collect();
            steps.push(StepRecord::new(step_idx as u64, lengths));
        }
    }

    let trace = WorkloadTrace::new(prompts, steps, cfg.responses_per_prompt, cfg.limits)?;
    if cfg.calibrated_drift {
        let deltas = epoch_deltas(&trace);
        if deltas.len() >= MIN_CALIBRATION_SAMPLES {
            let within = |b: f64| deltas.iter().filter(|d| d.abs() <= b).count() as f64 / deltas.len() as f64;
            let (p50, p100) = (within(50.0), within(100.0));
            if p50 < 0.70 || p100 < 0.90 {
                return Err(Error::Config(format!(
                    "drift parameters miss the calibration targets: P(|d|<=50)={p50:.3}, P(|d|<=100)={p100:.3}"
                )));
            }
        }
    }
    Ok(trace)
}

/// Per-prompt change of the mean response length between consecutive
/// appearances of the prompt (consecutive epochs when every prompt is
/// scheduled once per epoch).
pub fn epoch_deltas(trace: &WorkloadTrace) -> Vec<f64> {
    let mut last: BTreeMap<&PromptId, f64> = BTreeMap::new();
    let mut deltas = Vec::new();
    for step in trace.steps() {
        for id in step.scheduled_prompts() {
            let mean = step.mean_length(id).expect("validated trace");
            if let Some(prev) = last.insert(id, mean) {
                deltas.push(mean - prev);
            }
        }
    }
    deltas
}
