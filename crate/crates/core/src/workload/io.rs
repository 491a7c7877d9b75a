//! Trace file formats.
//!
//! `csv`: header `step_idx,prompt_id,response_idx,actual_len`, one row per
//! generated response. Prompt metadata lives in a sidecar next to the trace
//! (`trace.csv` -> `trace.prompts.jsonl`, one [`Prompt`] object per line).
//! Without a sidecar every prompt id becomes a distinct one-token prompt
//! with a ground-truth length of 1.
//!
//! `jsonl`: the first line is a header
//! `{"responses_per_prompt": G, "prompts": [{"id", "token_ids", "ground_truth_len"}, ...]}`
//! followed by one `{"step": n, "lengths": {"<prompt_id>": [l1, ..., lG]}}`
//! object per step.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Prompt, PromptId, StepRecord, TraceLimits, WorkloadTrace};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl TraceFormat {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(TraceFormat::Csv),
            "jsonl" | "json" => Some(TraceFormat::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::Jsonl),
            other => Err(Error::Argument(format!("unknown trace format `{other}` (expected csv or jsonl)"))),
        }
    }
}

pub fn prompts_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("prompts.jsonl")
}

#[derive(Serialize, Deserialize)]
struct Header {
    responses_per_prompt: usize,
    prompts: Vec<Prompt>,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    step: u64,
    lengths: BTreeMap<PromptId, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step_idx: u64,
    prompt_id: String,
    response_idx: usize,
    actual_len: u32,
}

pub fn load_trace(path: &Path, format: TraceFormat, limits: TraceLimits) -> Result<WorkloadTrace> {
    match format {
        TraceFormat::Csv => load_csv(path, limits),
        TraceFormat::Jsonl => load_jsonl(path, limits),
    }
}

pub fn save_trace(trace: &WorkloadTrace, path: &Path, format: TraceFormat) -> Result<()> {
    match format {
        TraceFormat::Csv => save_csv(trace, path),
        TraceFormat::Jsonl => save_jsonl(trace, path),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn load_jsonl(path: &Path, limits: TraceLimits) -> Result<WorkloadTrace> {
    let reader = BufReader::new(open(path)?);
    let mut header: Option<Header> = None;
    let mut steps = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(|e| Error::format(path, lineno, format!("bad header: {e}")))?);
            continue;
        }
        let step: StepLine = serde_json::from_str(&line).map_err(|e| Error::format(path, lineno, e))?;
        steps.push(StepRecord::new(step.step, step.lengths));
    }
    let header = header.ok_or_else(|| Error::format(path, 1, "missing header line"))?;
    WorkloadTrace::new(header.prompts, steps, header.responses_per_prompt, limits)
}

fn save_jsonl(trace: &WorkloadTrace, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::output(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        responses_per_prompt: trace.responses_per_prompt(),
        prompts: trace.prompts().cloned().collect(),
    };
    write_json_line(&mut w, &header, path)?;
    for step in trace.steps() {
        let line = StepLine {
            step: step.step_idx,
            lengths: step.actual_lengths.clone(),
        };
        write_json_line(&mut w, &line, path)?;
    }
    w.flush().map_err(|e| Error::output(path, e))
}

pub(crate) fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::output(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::output(path, e))
}

fn load_csv(path: &Path, limits: TraceLimits) -> Result<WorkloadTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(path)?);

    // (step, prompt) -> response_idx -> length
    let mut cells: BTreeMap<u64, BTreeMap<PromptId, BTreeMap<usize, u32>>> = BTreeMap::new();
    let mut step_order: Vec<u64> = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let lineno = i + 2;
        let row = row.map_err(|e| Error::format(path, lineno, e))?;
        if step_order.last() != Some(&row.step_idx) {
            if cells.contains_key(&row.step_idx) {
                return Err(Error::format(path, lineno, format!("rows of step {} are not contiguous", row.step_idx)));
            }
            step_order.push(row.step_idx);
        }
        let slot = cells
            .entry(row.step_idx)
            .or_default()
            .entry(PromptId(row.prompt_id.clone()))
            .or_default();
        if slot.insert(row.response_idx, row.actual_len).is_some() {
            return Err(Error::format(
                path,
                lineno,
                format!("duplicate response {} for prompt {} in step {}", row.response_idx, row.prompt_id, row.step_idx),
            ));
        }
    }

    let mut fan_out: Option<usize> = None;
    let mut steps = Vec::with_capacity(step_order.len());
    for step_idx in step_order {
        let per_prompt = cells.remove(&step_idx).unwrap_or_default();
        let mut lengths = BTreeMap::new();
        for (id, responses) in per_prompt {
            let g = responses.len();
            if responses.keys().copied().ne(0..g) {
                return Err(Error::Validation(format!(
                    "step {step_idx}, prompt {id}: response_idx values must be 0..{g}"
                )));
            }
            match fan_out {
                None => fan_out = Some(g),
                Some(expected) if expected != g => {
                    return Err(Error::Validation(format!(
                        "step {step_idx}, prompt {id}: expected {expected} responses, found {g}"
                    )))
                }
                _ => {}
            }
            lengths.insert(id, responses.into_values().collect());
        }
        steps.push(StepRecord::new(step_idx, lengths));
    }

    let sidecar = prompts_sidecar_path(path);
    let prompts = if sidecar.exists() {
        read_prompt_lines(&sidecar)?
    } else {
        let mut ids: Vec<&PromptId> = steps.iter().flat_map(|s| s.scheduled_prompts()).collect();
        ids.sort();
        ids.dedup();
        ids.into_iter()
            .enumerate()
            .map(|(i, id)| Prompt::new(id.clone(), vec![i as u32], 1))
            .collect()
    };
    WorkloadTrace::new(prompts, steps, fan_out.unwrap_or(1), limits)
}

fn read_prompt_lines(path: &Path) -> Result<Vec<Prompt>> {
    let reader = BufReader::new(open(path)?);
    let mut prompts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        prompts.push(serde_json::from_str(&line).map_err(|e| Error::format(path, i + 1, e))?);
    }
    Ok(prompts)
}

fn save_csv(trace: &WorkloadTrace, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::output(path, e.into());
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for step in trace.steps() {
        for (id, lengths) in &step.actual_lengths {
            for (response_idx, &actual_len) in lengths.iter().enumerate() {
                writer
                    .serialize(CsvRow {
                        step_idx: step.step_idx,
                        prompt_id: id.0.clone(),
                        response_idx,
                        actual_len,
                    })
                    .map_err(csv_err)?;
            }
        }
    }
    writer.flush().map_err(|e| Error::output(path, e))?;

    let sidecar = prompts_sidecar_path(path);
    let file = File::create(&sidecar).map_err(|e| Error::output(&sidecar, e))?;
    let mut w = BufWriter::new(file);
    for p in trace.prompts() {
        write_json_line(&mut w, p, &sidecar)?;
    }
    w.flush().map_err(|e| Error::output(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn minimal_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "step_idx,prompt_id,response_idx,actual_len\n0,a,0,12\n0,b,0,30\n").unwrap();
        let trace = load_trace(&path, TraceFormat::Csv, TraceLimits::default()).unwrap();
        assert_eq!(trace.prompt_count(), 2);
        assert_eq!(trace.steps().len(), 1);
        assert_eq!(trace.responses_per_prompt(), 1);
    }

    #[test]
    fn zero_length_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "step_idx,prompt_id,response_idx,actual_len\n0,a,0,12\n0,b,0,0\n").unwrap();
        let err = load_trace(&path, TraceFormat::Csv, TraceLimits::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("prompt b")), "{err}");
    }

    #[test]
    fn csv_parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "step_idx,prompt_id,response_idx,actual_len\n0,a,0,12\n0,b,x,3\n").unwrap();
        match load_trace(&path, TraceFormat::Csv, TraceLimits::default()).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_gap_in_response_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "step_idx,prompt_id,response_idx,actual_len\n0,a,0,12\n0,a,2,3\n").unwrap();
        assert!(matches!(
            load_trace(&path, TraceFormat::Csv, TraceLimits::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn jsonl_non_monotone_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let header = r#"{"responses_per_prompt":1,"prompts":[{"id":"a","token_ids":[1,2],"ground_truth_len":5}]}"#;
        let body = [2, 1, 3]
            .iter()
            .map(|s| format!(r#"{{"step":{s},"lengths":{{"a":[4]}}}}"#))
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(&path, format!("{header}\n{body}\n")).unwrap();
        let err = load_trace(&path, TraceFormat::Jsonl, TraceLimits::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("step 1")), "{err}");
    }

    #[test]
    fn jsonl_garbage_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let header = r#"{"responses_per_prompt":1,"prompts":[{"id":"a","token_ids":[1],"ground_truth_len":5}]}"#;
        fs::write(&path, format!("{header}\n{{\"step\":0,\"lengths\":{{\"a\":[-1]}}}}\n")).unwrap();
        match load_trace(&path, TraceFormat::Jsonl, TraceLimits::default()).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_trace(Path::new("/nonexistent/x.csv"), TraceFormat::Csv, TraceLimits::default()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.csv"));
    }
}
