//! Next-step response-length estimation from per-prompt history.
//!
//! Each prompt keeps a ring of its last `window` observed mean lengths
//! (mean over the `G` responses of one step). The estimate is an EWMA over
//! that ring seeded at the oldest entry; prompts without history fall back
//! to their reference-answer length.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{write_json_line, Prompt, PromptId, DEFAULT_MAX_RESPONSE_LEN};

pub const DEFAULT_WINDOW: usize = 1;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthHistory {
    window: usize,
    alpha: f64,
    max_response_len: u32,
    entries: BTreeMap<PromptId, VecDeque<f64>>,
}

#[derive(Serialize, Deserialize)]
struct HistoryHeader {
    window: usize,
    alpha: f64,
    max_response_len: u32,
}

#[derive(Serialize, Deserialize)]
struct HistoryLine {
    prompt_id: PromptId,
    means: Vec<f64>,
}

impl Default for LengthHistory {
    fn default() -> Self {
        LengthHistory::new(DEFAULT_WINDOW, DEFAULT_ALPHA, DEFAULT_MAX_RESPONSE_LEN).expect("defaults are valid")
    }
}

impl LengthHistory {
    pub fn new(window: usize, alpha: f64, max_response_len: u32) -> Result<Self> {
        if window == 0 {
            return Err(Error::Argument("EWMA window must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Argument(format!("EWMA alpha {alpha} outside (0, 1]")));
        }
        if max_response_len == 0 {
            return Err(Error::Argument("max_response_len must be positive".into()));
        }
        Ok(LengthHistory {
            window,
            alpha,
            max_response_len,
            entries: BTreeMap::new(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Retained means for a prompt, oldest first.
    pub fn observations(&self, id: &PromptId) -> Option<&VecDeque<f64>> {
        self.entries.get(id)
    }

    /// Record the lengths a prompt produced in one step.
    pub fn observe(&mut self, step_idx: u64, prompt_id: &PromptId, lengths: &[u32]) -> Result<()> {
        if lengths.is_empty() {
            return Err(Error::Argument(format!(
                "step {step_idx}, prompt {prompt_id}: no lengths to observe"
            )));
        }
        if let Some(bad) = lengths.iter().find(|&&l| l == 0 || l > self.max_response_len) {
            return Err(Error::Argument(format!(
                "step {step_idx}, prompt {prompt_id}: length {bad} outside [1, {}]",
                self.max_response_len
            )));
        }
        let mean = lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64;
        let ring = self.entries.entry(prompt_id.clone()).or_default();
        ring.push_back(mean);
        while ring.len() > self.window {
            ring.pop_front();
        }
        Ok(())
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(1.0, self.max_response_len as f64)
    }

    pub fn predict(&self, prompt: &Prompt) -> f64 {
        match self.entries.get(&prompt.id) {
            Some(ring) if !ring.is_empty() => {
                let mut obs = ring.iter();
                let seed = *obs.next().expect("non-empty");
                let est = obs.fold(seed, |est, &o| self.alpha * o + (1.0 - self.alpha) * est);
                self.clamp(est)
            }
            _ => self.clamp(prompt.ground_truth_len as f64),
        }
    }

    /// [`predict`](Self::predict) degraded by `noise`; reproducible for a
    /// given `rng` state.
    pub fn predict_noisy<R: Rng + ?Sized>(&self, prompt: &Prompt, noise: &NoiseModel, rng: &mut R) -> f64 {
        let clean = self.predict(prompt);
        match *noise {
            NoiseModel::Identity => clean,
            NoiseModel::BucketAccuracy {
                accuracy,
                bucket_width,
                max_shift,
            } => {
                if accuracy >= 1.0 || rng.random::<f64>() < accuracy {
                    return clean;
                }
                let buckets = (self.max_response_len as f64 / bucket_width).ceil() as i64;
                let current = ((clean - 1.0) / bucket_width).floor() as i64;
                let candidates: Vec<i64> = (-(max_shift as i64)..=max_shift as i64)
                    .filter(|&s| s != 0 && (0..buckets).contains(&(current + s)))
                    .collect();
                if candidates.is_empty() {
                    return clean;
                }
                let shift = candidates[rng.random_range(0..candidates.len())];
                self.clamp(clean + shift as f64 * bucket_width)
            }
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::output(path, e))?;
        let mut w = BufWriter::new(file);
        let header = HistoryHeader {
            window: self.window,
            alpha: self.alpha,
            max_response_len: self.max_response_len,
        };
        write_json_line(&mut w, &header, path)?;
        for (id, ring) in &self.entries {
            let line = HistoryLine {
                prompt_id: id.clone(),
                means: ring.iter().copied().collect(),
            };
            write_json_line(&mut w, &line, path)?;
        }
        w.flush().map_err(|e| Error::output(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::format(path, 1, "empty history file"))?;
        let first = first.map_err(|e| Error::io(path, e))?;
        let header: HistoryHeader = serde_json::from_str(&first).map_err(|e| Error::format(path, 1, e))?;
        let mut history = LengthHistory::new(header.window, header.alpha, header.max_response_len)?;
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: HistoryLine = serde_json::from_str(&line).map_err(|e| Error::format(path, i + 1, e))?;
            if entry.means.len() > history.window {
                return Err(Error::format(path, i + 1, "more entries than the window holds"));
            }
            history.entries.insert(entry.prompt_id, entry.means.into());
        }
        Ok(history)
    }
}

/// Emulated lower-accuracy predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    Identity,
    /// Lengths are binned into `bucket_width`-token buckets. With probability
    /// `accuracy` the estimate keeps its bucket; otherwise it moves to a
    /// different bucket at most `max_shift` away, chosen uniformly.
    BucketAccuracy {
        accuracy: f64,
        bucket_width: f64,
        max_shift: u32,
    },
}

impl NoiseModel {
    /// 44% bucket accuracy, 128-token buckets.
    pub fn external_predictor() -> Self {
        NoiseModel::BucketAccuracy {
            accuracy: 0.44,
            bucket_width: 128.0,
            max_shift: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Identity => Ok(()),
            NoiseModel::BucketAccuracy {
                accuracy,
                bucket_width,
                ..
            } => {
                if !(0.0..=1.0).contains(&accuracy) || !(bucket_width > 0.0) {
                    Err(Error::Config(format!(
                        "bucket accuracy {accuracy} must lie in [0, 1] and bucket width {bucket_width} must be positive"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}
