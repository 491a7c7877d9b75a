//! Shared-prefix analysis for deduplicated prefill.
//!
//! `D(L)` counts the distinct length-`L` prefixes of a batch, where a prompt
//! shorter than `L` contributes itself, terminated (so it never merges with a
//! longer prompt). Under that definition `D` is non-decreasing in `L`; the
//! planner picks the largest `L` whose `D(L)` fits the prefill actor.
//!
//! The index is built from the lexicographically sorted prompts and the
//! longest common prefix of each neighbour pair. Prompts sharing a given
//! prefix are contiguous in that order, which makes every count a single pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::Prompt;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillCapacity {
    /// Prompts the prefill actor handles in one pass.
    pub b_prefill: usize,
    pub gpu_count: u32,
}

impl PrefillCapacity {
    pub fn new(b_prefill: usize, gpu_count: u32) -> Result<Self> {
        if b_prefill == 0 {
            return Err(Error::Argument("B_prefill must be at least 1".into()));
        }
        Ok(PrefillCapacity { b_prefill, gpu_count })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct SortedEntry {
    len: usize,
    /// Common prefix with the previous entry in sorted order (0 for the first).
    lcp: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixIndex {
    sorted: Vec<SortedEntry>,
    /// `counts[l]` is `D(l)` for `l` in `0..=max_len`.
    counts: Vec<usize>,
    min_len: usize,
    max_len: usize,
    trie_nodes: u64,
}

impl PrefixIndex {
    pub fn build<'a>(prompts: impl IntoIterator<Item = &'a Prompt>) -> Result<Self> {
        let mut seqs: Vec<&[u32]> = prompts.into_iter().map(|p| p.token_ids.as_slice()).collect();
        if seqs.is_empty() {
            return Err(Error::Argument("cannot index an empty batch".into()));
        }
        seqs.sort_unstable();

        let sorted: Vec<SortedEntry> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| SortedEntry {
                len: s.len(),
                lcp: if i == 0 { 0 } else { common_prefix(seqs[i - 1], s) },
            })
            .collect();

        let min_len = sorted.iter().map(|e| e.len).min().unwrap_or(0);
        let max_len = sorted.iter().map(|e| e.len).max().unwrap_or(0);

        // trie nodes at depth d: entries with lcp < d <= len
        let mut node_delta = vec![0i64; max_len + 2];
        // distinct whole prompts of length < L: +1 from L = len + 1
        let mut short_delta = vec![0i64; max_len + 2];
        for (i, e) in sorted.iter().enumerate() {
            let start = if i == 0 { 0 } else { e.lcp };
            if start < e.len {
                node_delta[start + 1] += 1;
                node_delta[e.len + 1] -= 1;
            }
            if is_new_string(&sorted, i) {
                short_delta[e.len + 1] += 1;
            }
        }
        let mut counts = vec![0usize; max_len + 1];
        let (mut nodes, mut short) = (0i64, 0i64);
        let mut trie_nodes = 0u64;
        for (l, count) in counts.iter_mut().enumerate() {
            nodes += node_delta[l];
            short += short_delta[l];
            trie_nodes += nodes as u64;
            *count = if l == 0 { 1 } else { (nodes + short) as usize };
        }

        Ok(PrefixIndex {
            sorted,
            counts,
            min_len,
            max_len,
            trie_nodes,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.sorted.len()
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `D(L)`.
    pub fn unique_prefix_count(&self, l: usize) -> usize {
        self.counts[l.min(self.max_len)]
    }

    /// `D(L)` for `L = 0..=max_len`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Distinct non-empty prefixes over the batch: the fewest prefill tokens
    /// any schedule could compute.
    pub fn trie_node_count(&self) -> u64 {
        self.trie_nodes
    }

    pub fn total_prompt_tokens(&self) -> u64 {
        self.sorted.iter().map(|e| e.len as u64).sum()
    }

    /// Tokens of each distinct length-`l` truncated prefix group, with the
    /// per-prompt remainder beyond `l` folded into its group, in sorted order.
    fn group_tokens(&self, l: usize) -> Vec<u64> {
        let mut groups: Vec<u64> = Vec::new();
        for (i, e) in self.sorted.iter().enumerate() {
            let starts_group = i == 0 || {
                let prev = self.sorted[i - 1];
                if e.len >= l {
                    !(prev.len >= l && e.lcp >= l)
                } else {
                    is_new_string(&self.sorted, i)
                }
            };
            if starts_group {
                groups.push(e.len.min(l) as u64);
            }
            *groups.last_mut().expect("group started") += e.len.saturating_sub(l) as u64;
        }
        groups
    }
}

fn common_prefix(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn is_new_string(sorted: &[SortedEntry], i: usize) -> bool {
    i == 0 || {
        let (prev, e) = (sorted[i - 1], sorted[i]);
        !(prev.len == e.len && e.lcp == e.len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixChoice {
    pub length: usize,
    pub unique_prefixes: usize,
    /// No length in range fits; prefill runs in several waves at `length = L_min`.
    pub capacity_exceeded: bool,
}

pub fn select_prefix_length(index: &PrefixIndex, cap: &PrefillCapacity, l_min: usize, l_max: usize) -> Result<PrefixChoice> {
    if l_min > l_max {
        return Err(Error::Argument(format!("L_min {l_min} exceeds L_max {l_max}")));
    }
    if cap.b_prefill == 0 {
        return Err(Error::Argument("B_prefill must be at least 1".into()));
    }
    let range: Vec<usize> = (l_min..=l_max).collect();
    // D is non-decreasing, so the feasible lengths form a prefix of the range
    let feasible = range.partition_point(|&l| index.unique_prefix_count(l) <= cap.b_prefill);
    let (length, capacity_exceeded) = if feasible == 0 {
        (l_min, true)
    } else {
        (range[feasible - 1], false)
    };
    Ok(PrefixChoice {
        length,
        unique_prefixes: index.unique_prefix_count(length),
        capacity_exceeded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupSavings {
    pub raw_prefill_tokens: u64,
    pub dedup_prefill_tokens: u64,
    pub saved_fraction: f64,
}

pub fn dedup_savings(index: &PrefixIndex, l_star: usize, responses_per_prompt: usize) -> DedupSavings {
    let raw = index.total_prompt_tokens() * responses_per_prompt as u64;
    let dedup: u64 = index.group_tokens(l_star).iter().sum();
    DedupSavings {
        raw_prefill_tokens: raw,
        dedup_prefill_tokens: dedup,
        saved_fraction: if raw == 0 { 0.0 } else { 1.0 - dedup as f64 / raw as f64 },
    }
}

/// Token count of each prefill pass: distinct prefixes at `l_star` are
/// packed `b_prefill` at a time, in sorted order.
pub fn prefill_waves(index: &PrefixIndex, l_star: usize, b_prefill: usize) -> Vec<u64> {
    index
        .group_tokens(l_star)
        .chunks(b_prefill.max(1))
        .map(|c| c.iter().sum())
        .collect()
}

/// Prefix analysis attached to a step plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixReport {
    /// `D(L)` for `L = 0..=L_max`.
    pub unique_prefix_counts: Vec<usize>,
    pub l_min: usize,
    pub l_max: usize,
    pub choice: PrefixChoice,
    pub savings: DedupSavings,
    pub waves: Vec<u64>,
    pub trie_node_count: u64,
}

impl PrefixReport {
    pub fn analyze(index: &PrefixIndex, cap: &PrefillCapacity, responses_per_prompt: usize) -> Result<Self> {
        let (l_min, l_max) = (index.min_len(), index.max_len());
        let choice = select_prefix_length(index, cap, l_min, l_max)?;
        Ok(PrefixReport {
            unique_prefix_counts: index.counts().to_vec(),
            l_min,
            l_max,
            savings: dedup_savings(index, choice.length, responses_per_prompt),
            waves: prefill_waves(index, choice.length, cap.b_prefill),
            trie_node_count: index.trie_node_count(),
            choice,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompts(seqs: &[&[u32]]) -> Vec<Prompt> {
        seqs.iter()
            .enumerate()
            .map(|(i, s)| Prompt::new(format!("p{i}"), s.to_vec(), 1))
            .collect()
    }

    const A: u32 = 0;
    const B: u32 = 1;
    const C: u32 = 2;
    const D: u32 = 3;
    const X: u32 = 23;
    const Y: u32 = 24;
    const Z: u32 = 25;

    fn abc_abd_xyz() -> PrefixIndex {
        PrefixIndex::build(&prompts(&[&[A, B, C], &[A, B, D], &[X, Y, Z]])).unwrap()
    }

    #[test]
    fn hand_enumerated_counts() {
        let idx = abc_abd_xyz();
        assert_eq!(
            (idx.unique_prefix_count(1), idx.unique_prefix_count(2), idx.unique_prefix_count(3)),
            (2, 2, 3)
        );
        // a b, a b c, a b d, x, x y, x y z
        assert_eq!(idx.trie_node_count(), 7);
    }

    #[test]
    fn identical_and_disjoint_batches() {
        let same = PrefixIndex::build(&prompts(&[&[4u32, 5, 6, 7] as &[u32]; 5])).unwrap();
        assert!((1..=4).all(|l| same.unique_prefix_count(l) == 1));
        let distinct = PrefixIndex::build(&prompts(&[&[1, 9], &[2, 9], &[3, 9, 9]])).unwrap();
        assert!((1..=3).all(|l| distinct.unique_prefix_count(l) == 3));
    }

    #[test]
    fn short_prompts_are_terminated() {
        let idx = PrefixIndex::build(&prompts(&[&[1, 2], &[1, 2, 3]])).unwrap();
        assert_eq!(idx.unique_prefix_count(2), 1);
        assert_eq!(idx.unique_prefix_count(3), 2);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(PrefixIndex::build(&[]).is_err());
    }

    #[test]
    fn select_examples() {
        let idx = abc_abd_xyz();
        let cap = |b| PrefillCapacity::new(b, 2).unwrap();
        assert_eq!(select_prefix_length(&idx, &cap(2), 1, 3).unwrap().length, 2);
        assert_eq!(select_prefix_length(&idx, &cap(3), 1, 3).unwrap().length, 3);
        let tight = select_prefix_length(&idx, &cap(1), 1, 3).unwrap();
        assert!(tight.capacity_exceeded);
        assert_eq!(tight.length, 1);
        assert!(select_prefix_length(&idx, &cap(1), 3, 1).is_err());

        let same = PrefixIndex::build(&prompts(&[&[4u32, 5, 6] as &[u32]; 3])).unwrap();
        assert_eq!(select_prefix_length(&same, &cap(1), 3, 3).unwrap().length, 3);
    }

    #[test]
    fn savings_examples() {
        let distinct = PrefixIndex::build(&prompts(&[&[1, 7, 7], &[2, 7, 7], &[3, 7, 7]])).unwrap();
        let s = dedup_savings(&distinct, 3, 3);
        assert_eq!(s.raw_prefill_tokens, 27);
        assert_eq!(s.dedup_prefill_tokens, 9);
        assert!((s.saved_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dedup_savings(&distinct, 3, 1).saved_fraction, 0.0);

        let twins = PrefixIndex::build(&prompts(&[&[5, 6, 7], &[5, 6, 7]])).unwrap();
        assert_eq!(dedup_savings(&twins, 3, 1).saved_fraction, 0.5);
    }

    #[test]
    fn waves_split_at_capacity() {
        let idx = abc_abd_xyz();
        // L = 1: groups {abc, abd} -> 1 + 2 + 2, {xyz} -> 3
        assert_eq!(prefill_waves(&idx, 1, 1), vec![5, 3]);
        assert_eq!(prefill_waves(&idx, 1, 2), vec![8]);
        assert_eq!(prefill_waves(&idx, 3, 8), vec![9]);
    }
}
