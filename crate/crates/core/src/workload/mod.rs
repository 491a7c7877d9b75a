//! Prompt/response-length traces that drive planning and simulation.
//!
//! A [`WorkloadTrace`] is the ground truth replayed by the simulator: the
//! prompt set (token ids are synthetic integers, only prefix equality
//! matters) and, per training step, the `G` actual response lengths of
//! every scheduled prompt.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_trace, prompts_sidecar_path, save_trace, TraceFormat};
pub(crate) use io::write_json_line;
pub use synth::{epoch_deltas, generate_synthetic, DriftConfig, LengthDistribution, PrefixSharing, SynthConfig};

pub const DEFAULT_MAX_PROMPT_LEN: usize = 1024;
pub const DEFAULT_MAX_RESPONSE_LEN: u32 = 2048;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub String);

impl PromptId {
    pub fn new(id: impl Into<String>) -> Self {
        PromptId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PromptId {
    fn from(s: &str) -> Self {
        PromptId(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: PromptId,
    pub token_ids: Vec<u32>,
    /// Length of the dataset's reference answer; the cold-start estimate.
    pub ground_truth_len: u32,
}

impl Prompt {
    pub fn new(id: impl Into<PromptId>, token_ids: Vec<u32>, ground_truth_len: u32) -> Self {
        Prompt {
            id: id.into(),
            token_ids,
            ground_truth_len,
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.token_ids.len()
    }
}

impl From<String> for PromptId {
    fn from(s: String) -> Self {
        PromptId(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLimits {
    pub max_prompt_len: usize,
    pub max_response_len: u32,
}

impl Default for TraceLimits {
    fn default() -> Self {
        TraceLimits {
            max_prompt_len: DEFAULT_MAX_PROMPT_LEN,
            max_response_len: DEFAULT_MAX_RESPONSE_LEN,
        }
    }
}

/// One training step: the scheduled batch and the actual lengths of the `G`
/// responses generated for each scheduled prompt. The batch is the key set
/// of `actual_lengths`, so it is always iterated in prompt-id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_idx: u64,
    pub actual_lengths: BTreeMap<PromptId, Vec<u32>>,
}

impl StepRecord {
    pub fn new(step_idx: u64, lengths: impl IntoIterator<Item = (PromptId, Vec<u32>)>) -> Self {
        StepRecord {
            step_idx,
            actual_lengths: lengths.into_iter().collect(),
        }
    }

    pub fn scheduled_prompts(&self) -> impl Iterator<Item = &PromptId> {
        self.actual_lengths.keys()
    }

    pub fn batch_size(&self) -> usize {
        self.actual_lengths.len()
    }

    pub fn total_responses(&self) -> usize {
        self.actual_lengths.values().map(Vec::len).sum()
    }

    /// Mean over the `G` responses of one prompt.
    pub fn mean_length(&self, id: &PromptId) -> Option<f64> {
        self.actual_lengths
            .get(id)
            .filter(|l| !l.is_empty())
            .map(|l| l.iter().map(|&x| x as f64).sum::<f64>() / l.len() as f64)
    }
}

/// Validated, immutable trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    prompts: BTreeMap<PromptId, Prompt>,
    steps: Vec<StepRecord>,
    responses_per_prompt: usize,
    limits: TraceLimits,
}

impl WorkloadTrace {
    pub fn new(
        prompts: impl IntoIterator<Item = Prompt>,
        steps: Vec<StepRecord>,
        responses_per_prompt: usize,
        limits: TraceLimits,
    ) -> Result<Self> {
        if responses_per_prompt == 0 {
            return Err(Error::Validation("responses_per_prompt must be at least 1".into()));
        }
        let mut map = BTreeMap::new();
        for p in prompts {
            if p.prompt_len() == 0 || p.prompt_len() > limits.max_prompt_len {
                return Err(Error::Validation(format!(
                    "prompt {}: length {} outside [1, {}]",
                    p.id,
                    p.prompt_len(),
                    limits.max_prompt_len
                )));
            }
            if let Some(dup) = map.insert(p.id.clone(), p) {
                return Err(Error::Validation(format!("prompt {}: duplicate id", dup.id)));
            }
        }

        let mut last: Option<u64> = None;
        for step in &steps {
            if let Some(prev) = last {
                if step.step_idx <= prev {
                    return Err(Error::Validation(format!(
                        "step {}: step_idx not strictly increasing (follows {prev})",
                        step.step_idx
                    )));
                }
            }
            last = Some(step.step_idx);
            if step.actual_lengths.is_empty() {
                return Err(Error::Validation(format!("step {}: empty batch", step.step_idx)));
            }
            for (id, lengths) in &step.actual_lengths {
                if !map.contains_key(id) {
                    return Err(Error::Validation(format!(
                        "step {}: unknown prompt {id}",
                        step.step_idx
                    )));
                }
                if lengths.len() != responses_per_prompt {
                    return Err(Error::Validation(format!(
                        "step {}, prompt {id}: expected {responses_per_prompt} responses, found {}",
                        step.step_idx,
                        lengths.len()
                    )));
                }
                if let Some(bad) = lengths
                    .iter()
                    .find(|&&l| l == 0 || l > limits.max_response_len)
                {
                    return Err(Error::Validation(format!(
                        "step {}, prompt {id}: response length {bad} outside [1, {}]",
                        step.step_idx, limits.max_response_len
                    )));
                }
            }
        }

        Ok(WorkloadTrace {
            prompts: map,
            steps,
            responses_per_prompt,
            limits,
        })
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.values()
    }

    pub fn prompt(&self, id: &PromptId) -> Option<&Prompt> {
        self.prompts.get(id)
    }

    pub fn prompt_count(&self) -> usize {
        self.prompts.len()
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn responses_per_prompt(&self) -> usize {
        self.responses_per_prompt
    }

    pub fn limits(&self) -> TraceLimits {
        self.limits
    }

    /// Prompts of one step, in batch order.
    pub fn batch(&self, step: &StepRecord) -> Vec<&Prompt> {
        step.scheduled_prompts()
            .filter_map(|id| self.prompts.get(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(id: &str, len: usize) -> Prompt {
        Prompt::new(id, (0..len as u32).collect(), 10)
    }

    #[test]
    fn rejects_unknown_prompt() {
        let step = StepRecord::new(0, [(PromptId::from("zz"), vec![5])]);
        let err = WorkloadTrace::new([prompt("a", 3)], vec![step], 1, TraceLimits::default()).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn rejects_wrong_fan_out() {
        let step = StepRecord::new(0, [(PromptId::from("a"), vec![5, 6])]);
        let err = WorkloadTrace::new([prompt("a", 3)], vec![step], 3, TraceLimits::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_overlong_response_and_prompt() {
        let limits = TraceLimits {
            max_prompt_len: 4,
            max_response_len: 10,
        };
        let step = StepRecord::new(0, [(PromptId::from("a"), vec![11])]);
        assert!(WorkloadTrace::new([prompt("a", 3)], vec![step], 1, limits).is_err());
        assert!(WorkloadTrace::new([prompt("a", 5)], vec![], 1, limits).is_err());
        assert!(WorkloadTrace::new([prompt("a", 0)], vec![], 1, limits).is_err());
    }

    #[test]
    fn rejects_empty_batch_and_duplicate_ids() {
        let step = StepRecord::new(0, []);
        assert!(WorkloadTrace::new([prompt("a", 3)], vec![step], 1, TraceLimits::default()).is_err());
        assert!(WorkloadTrace::new([prompt("a", 3), prompt("a", 2)], vec![], 1, TraceLimits::default()).is_err());
    }

    #[test]
    fn mean_length_over_group() {
        let step = StepRecord::new(0, [(PromptId::from("a"), vec![1, 2, 6])]);
        assert_eq!(step.mean_length(&"a".into()), Some(3.0));
        assert_eq!(step.mean_length(&"b".into()), None);
    }
}
