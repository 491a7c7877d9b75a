//! Locality-aware actor placement.
//!
//! The prefill actor runs on the learner's GPUs. The decode actor with the
//! longest estimated time goes on the learner's node and starts without a KV
//! transfer; the rest are placed heaviest first on whichever node has the
//! best bandwidth to the learner. Model sync and KV transfer latencies are
//! point-to-point `bytes / bandwidth` estimates, all links used in parallel.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{ActorGroup, ActorId, GenerationPlan};
use crate::profile::line_of;
use crate::workload::{Prompt, PromptId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub gpu_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub nodes: Vec<NodeSpec>,
    /// Bytes/second between GPUs of the same node.
    pub intra_node_bandwidth: f64,
    /// Bytes/second between GPUs of different nodes.
    pub inter_node_bandwidth: f64,
    /// Optional node x node override; the diagonal is the intra-node tier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_matrix: Option<Vec<Vec<f64>>>,
    /// Global GPU indices (nodes numbered consecutively) of the learner.
    pub learner_gpus: Vec<usize>,
}

impl ClusterTopology {
    /// `nodes` identical nodes; the learner takes the first `learner_gpus`
    /// GPUs of node 0.
    pub fn uniform(nodes: usize, gpus_per_node: usize, intra: f64, inter: f64, learner_gpus: usize) -> Self {
        ClusterTopology {
            nodes: vec![NodeSpec { gpu_count: gpus_per_node }; nodes],
            intra_node_bandwidth: intra,
            inter_node_bandwidth: inter,
            bandwidth_matrix: None,
            learner_gpus: (0..learner_gpus).collect(),
        }
    }

    /// Two 8-GPU PCIe nodes with a 2-GPU learner.
    pub fn reference() -> Self {
        ClusterTopology::uniform(2, 8, 64.0e9, 12.5e9, 2)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let topo: ClusterTopology = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.line(), e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, line_of(&text, e.span()), e.message()))?
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("topology: {m}")));
        if self.nodes.is_empty() || self.nodes.iter().any(|n| n.gpu_count == 0) {
            return bad("every node needs at least one GPU".into());
        }
        if !(self.inter_node_bandwidth > 0.0) || self.intra_node_bandwidth < self.inter_node_bandwidth {
            return bad("bandwidths must be positive with intra-node >= inter-node".into());
        }
        if let Some(m) = &self.bandwidth_matrix {
            let n = self.nodes.len();
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return bad(format!("bandwidth matrix must be {n}x{n}"));
            }
            for i in 0..n {
                for j in 0..n {
                    if !(m[i][j] > 0.0) || m[i][j] != m[j][i] {
                        return bad("bandwidth matrix must be positive and symmetric".into());
                    }
                    if m[i][j] > m[i][i] {
                        return bad(format!("node {i}: inter-node bandwidth exceeds intra-node"));
                    }
                }
            }
        }
        if self.learner_gpus.is_empty() {
            return bad("learner needs at least one GPU".into());
        }
        let total = self.gpu_total();
        let unique: BTreeSet<_> = self.learner_gpus.iter().collect();
        if unique.len() != self.learner_gpus.len() || self.learner_gpus.iter().any(|&g| g >= total) {
            return bad("learner GPUs must be distinct valid indices".into());
        }
        Ok(())
    }

    pub fn gpu_total(&self) -> usize {
        self.nodes.iter().map(|n| n.gpu_count).sum()
    }

    pub fn node_of(&self, gpu: usize) -> usize {
        let mut base = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            if gpu < base + n.gpu_count {
                return i;
            }
            base += n.gpu_count;
        }
        panic!("GPU {gpu} out of range");
    }

    fn node_gpus(&self, node: usize) -> std::ops::Range<usize> {
        let base: usize = self.nodes[..node].iter().map(|n| n.gpu_count).sum();
        base..base + self.nodes[node].gpu_count
    }

    pub fn node_bandwidth(&self, a: usize, b: usize) -> f64 {
        match &self.bandwidth_matrix {
            Some(m) => m[a][b],
            None if a == b => self.intra_node_bandwidth,
            None => self.inter_node_bandwidth,
        }
    }

    /// Bottleneck bandwidth between two GPU sets.
    pub fn bandwidth(&self, src: &[usize], dst: &[usize]) -> f64 {
        let src_nodes: BTreeSet<usize> = src.iter().map(|&g| self.node_of(g)).collect();
        let dst_nodes: BTreeSet<usize> = dst.iter().map(|&g| self.node_of(g)).collect();
        src_nodes
            .iter()
            .flat_map(|&a| dst_nodes.iter().map(move |&b| (a, b)))
            .map(|(a, b)| self.node_bandwidth(a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSizes {
    pub model_bytes: f64,
    /// Prefilled KV bytes each decode actor receives, indexed by actor id.
    pub kv_bytes: Vec<f64>,
}

/// KV bytes per actor: each distinct `l_star`-token prefix among the
/// actor's prompts once, plus every prompt's tokens beyond `l_star`.
pub fn kv_transfer_bytes(groups: &[ActorGroup], prompts: &BTreeMap<PromptId, &Prompt>, l_star: usize, bytes_per_token: f64) -> Vec<f64> {
    groups
        .iter()
        .map(|g| {
            let members: Vec<&Prompt> = g.prompt_ids().filter_map(|id| prompts.get(id).copied()).collect();
            let unique: HashSet<&[u32]> = members
                .iter()
                .map(|p| &p.token_ids[..p.token_ids.len().min(l_star)])
                .collect();
            let shared: usize = unique.iter().map(|s| s.len()).sum();
            let tails: usize = members.iter().map(|p| p.token_ids.len().saturating_sub(l_star)).sum();
            (shared + tails) as f64 * bytes_per_token
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorPlacement {
    pub actor_id: ActorId,
    pub node: usize,
    pub gpus: Vec<usize>,
    /// Model-sync latency, seconds.
    pub l_model: f64,
    /// KV-transfer latency, seconds.
    pub l_kv: f64,
    /// Shares the prefill actor's node and starts without a KV transfer.
    pub co_located: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSlack {
    pub actor_id: ActorId,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub prefill_gpus: Vec<usize>,
    /// Indexed by actor id.
    pub actors: Vec<ActorPlacement>,
    /// `actor_bandwidth[a][b]`: bytes/second between the GPU sets of actors `a` and `b`.
    pub actor_bandwidth: Vec<Vec<f64>>,
    #[serde(default)]
    pub overlap_slack: Vec<OverlapSlack>,
}

impl PlacementPlan {
    pub fn actor(&self, id: ActorId) -> &ActorPlacement {
        &self.actors[id]
    }

    pub fn record_overlap(&mut self, slack: Vec<OverlapSlack>) {
        self.overlap_slack = slack;
    }
}

/// Actor ids ordered heaviest first, ties by id.
pub fn heaviest_first(times: &[f64]) -> Vec<ActorId> {
    let mut order: Vec<ActorId> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
    order
}

pub fn place(plan: &GenerationPlan, topo: &ClusterTopology, sizes: &TransferSizes) -> Result<PlacementPlan> {
    place_groups(&plan.groups, &plan.est_time_per_actor, topo, sizes)
}

pub fn place_groups(groups: &[ActorGroup], times: &[f64], topo: &ClusterTopology, sizes: &TransferSizes) -> Result<PlacementPlan> {
    let learner_nodes: BTreeSet<usize> = topo.learner_gpus.iter().map(|&g| topo.node_of(g)).collect();
    let learner_node = topo.node_of(topo.learner_gpus[0]);
    let learner: HashSet<usize> = topo.learner_gpus.iter().copied().collect();
    let mut free: Vec<Vec<usize>> = (0..topo.nodes.len())
        .map(|n| topo.node_gpus(n).filter(|g| !learner.contains(g)).collect())
        .collect();

    let needed: usize = groups.iter().map(|g| g.gpu_count as usize).sum();
    let available: usize = free.iter().map(Vec::len).sum();
    let shortfall = |needed: usize, available: usize| Error::Placement {
        needed,
        available,
        shortfall: needed.saturating_sub(available),
    };
    if needed > available {
        return Err(shortfall(needed, available));
    }

    // nodes by bandwidth to the learner, best first
    let mut node_rank: Vec<(usize, f64)> = (0..topo.nodes.len())
        .map(|n| {
            let bw = learner_nodes
                .iter()
                .map(|&l| topo.node_bandwidth(l, n))
                .fold(f64::INFINITY, f64::min);
            (n, bw)
        })
        .collect();
    node_rank.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut placed: Vec<Option<ActorPlacement>> = vec![None; groups.len()];
    for (rank, actor_id) in heaviest_first(times).into_iter().enumerate() {
        let want = groups[actor_id].gpu_count as usize;
        let co_located = rank == 0 && free[learner_node].len() >= want;
        let node = if co_located {
            learner_node
        } else {
            node_rank
                .iter()
                .map(|&(n, _)| n)
                .find(|&n| free[n].len() >= want)
                .ok_or_else(|| {
                    // GPUs are free but split across nodes in pieces too small for one actor
                    let placed: usize = placed.iter().flatten().map(|p| p.gpus.len()).sum();
                    let usable = placed + free.iter().map(|f| f.len() / want * want).sum::<usize>();
                    shortfall(needed, usable)
                })?
        };
        let gpus: Vec<usize> = free[node].drain(..want).collect();
        let bw = topo.bandwidth(&topo.learner_gpus, &gpus);
        let kv = sizes.kv_bytes.get(actor_id).copied().unwrap_or(0.0);
        placed[actor_id] = Some(ActorPlacement {
            actor_id,
            node,
            l_model: sizes.model_bytes / bw,
            l_kv: if co_located { 0.0 } else { kv / bw },
            co_located,
            gpus,
        });
    }
    let actors: Vec<ActorPlacement> = placed.into_iter().map(|p| p.expect("every actor placed")).collect();
    let actor_bandwidth = actors
        .iter()
        .map(|a| actors.iter().map(|b| topo.bandwidth(&a.gpus, &b.gpus)).collect())
        .collect();
    Ok(PlacementPlan {
        prefill_gpus: topo.learner_gpus.clone(),
        actors,
        actor_bandwidth,
        overlap_slack: Vec::new(),
    })
}

/// Slack of the transfer-hiding condition for every actor other than the
/// heaviest: `(L_prefill + L_decode^1) - (L_model^i + L_kv^i + L_decode^i)`.
/// Negative slack means the transfers of actor `i` are not hidden.
pub fn check_overlap(pp: &PlacementPlan, plan: &GenerationPlan, l_prefill: f64) -> Vec<OverlapSlack> {
    overlap_slacks(pp, &plan.est_time_per_actor, l_prefill)
}

pub fn overlap_slacks(pp: &PlacementPlan, times: &[f64], l_prefill: f64) -> Vec<OverlapSlack> {
    let order = heaviest_first(times);
    let Some(&first) = order.first() else {
        return Vec::new();
    };
    let budget = l_prefill + times[first];
    let mut slack: Vec<OverlapSlack> = order[1..]
        .iter()
        .map(|&i| {
            let a = pp.actor(i);
            OverlapSlack {
                actor_id: i,
                slack: budget - (a.l_model + a.l_kv + times[i]),
            }
        })
        .collect();
    slack.sort_by_key(|s| s.actor_id);
    slack
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(n: usize, gpus: u32) -> Vec<ActorGroup> {
        (0..n)
            .map(|actor_id| ActorGroup {
                actor_id,
                members: Vec::new(),
                responses_per_prompt: 1,
                gpu_count: gpus,
            })
            .collect()
    }

    fn sizes(model: f64, kv: &[f64]) -> TransferSizes {
        TransferSizes {
            model_bytes: model,
            kv_bytes: kv.to_vec(),
        }
    }

    #[test]
    fn single_actor_is_co_located() {
        let topo = ClusterTopology::reference();
        let pp = place_groups(&groups(1, 2), &[5.0], &topo, &sizes(1e9, &[1e8])).unwrap();
        let a = pp.actor(0);
        assert!(a.co_located);
        assert_eq!(a.l_kv, 0.0);
        assert_eq!(a.node, 0);
        assert!(a.gpus.iter().all(|g| !topo.learner_gpus.contains(g)));
    }

    #[test]
    fn heaviest_near_lightest_far() {
        // node 0: 6 GPUs, 2 for the learner -> room for two 2-GPU actors
        let topo = ClusterTopology::uniform(2, 6, 100.0, 10.0, 2);
        let times = [3.0, 9.0, 5.0];
        let pp = place_groups(&groups(3, 2), &times, &topo, &sizes(1000.0, &[50.0, 50.0, 50.0])).unwrap();
        assert_eq!((pp.actor(1).node, pp.actor(1).co_located), (0, true));
        assert_eq!((pp.actor(2).node, pp.actor(2).co_located), (0, false));
        assert_eq!(pp.actor(0).node, 1);
        assert_eq!(pp.actor(2).l_model, 10.0);
        assert_eq!(pp.actor(2).l_kv, 0.5);
        assert_eq!(pp.actor(0).l_model, 100.0);
        assert_eq!(pp.actor(0).l_kv, 5.0);
        assert_eq!(pp.actor_bandwidth[1][2], 100.0);
        assert_eq!(pp.actor_bandwidth[1][0], 10.0);
    }

    #[test]
    fn insufficient_gpus_reports_shortfall() {
        let topo = ClusterTopology::uniform(1, 8, 100.0, 10.0, 2);
        match place_groups(&groups(4, 2), &[1.0; 4], &topo, &sizes(0.0, &[])) {
            Err(Error::Placement { needed, available, shortfall }) => {
                assert_eq!((needed, available, shortfall), (8, 6, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fragmented_nodes_count_only_whole_actor_blocks() {
        // 2 + 3 + 3 free GPUs hold only three 2-GPU actors
        let topo = ClusterTopology::uniform(3, 3, 100.0, 10.0, 1);
        match place_groups(&groups(4, 2), &[1.0; 4], &topo, &sizes(0.0, &[])) {
            Err(Error::Placement { needed, available, shortfall }) => {
                assert_eq!((needed, available, shortfall), (8, 6, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlap_hand_computation() {
        let topo = ClusterTopology::uniform(2, 6, 100.0, 10.0, 2);
        let times = [3.0, 9.0, 5.0];
        let pp = place_groups(&groups(3, 2), &times, &topo, &sizes(1000.0, &[50.0, 50.0, 50.0])).unwrap();
        let slack = overlap_slacks(&pp, &times, 2.0);
        // budget = 2 + 9 = 11
        assert_eq!(slack[0], OverlapSlack { actor_id: 0, slack: 11.0 - (100.0 + 5.0 + 3.0) });
        assert_eq!(slack[1], OverlapSlack { actor_id: 2, slack: 11.0 - (10.0 + 0.5 + 5.0) });
    }

    #[test]
    fn zero_transfers_never_violate() {
        let topo = ClusterTopology::uniform(3, 4, 100.0, 10.0, 2);
        let times = [4.0, 1.0, 4.0, 2.5, 0.5];
        let pp = place_groups(&groups(5, 2), &times, &topo, &sizes(0.0, &[0.0; 5])).unwrap();
        assert!(overlap_slacks(&pp, &times, 0.0).iter().all(|s| s.slack >= 0.0));
    }

    #[test]
    fn matrix_bandwidth_steers_placement() {
        let mut topo = ClusterTopology::uniform(3, 4, 100.0, 10.0, 2);
        topo.bandwidth_matrix = Some(vec![
            vec![100.0, 5.0, 40.0],
            vec![5.0, 100.0, 5.0],
            vec![40.0, 5.0, 100.0],
        ]);
        topo.validate().unwrap();
        let pp = place_groups(&groups(3, 2), &[3.0, 2.0, 1.0], &topo, &sizes(0.0, &[])).unwrap();
        assert_eq!(pp.actor(0).node, 0);
        assert_eq!(pp.actor(1).node, 2);
        assert_eq!(pp.actor(2).node, 2);
    }

    #[test]
    fn kv_bytes_count_shared_prefixes_once() {
        use crate::planner::PlannedPrompt;
        let ps: Vec<Prompt> = [("a", vec![1, 2, 3, 4]), ("b", vec![1, 2, 3, 9]), ("c", vec![7])]
            .into_iter()
            .map(|(id, t)| Prompt::new(id, t, 1))
            .collect();
        let lookup: BTreeMap<PromptId, &Prompt> = ps.iter().map(|p| (p.id.clone(), p)).collect();
        let member = |p: &Prompt| PlannedPrompt {
            prompt_id: p.id.clone(),
            predicted_len: 1.0,
            prompt_len: p.prompt_len(),
        };
        let g = vec![ActorGroup {
            actor_id: 0,
            members: ps.iter().map(member).collect(),
            responses_per_prompt: 4,
            gpu_count: 1,
        }];
        // [1,2,3] once + two 1-token tails + [7]
        assert_eq!(kv_transfer_bytes(&g, &lookup, 3, 10.0), vec![60.0]);
        assert_eq!(kv_transfer_bytes(&g, &lookup, 0, 10.0), vec![90.0]);
    }

    #[test]
    fn topology_validation() {
        let mut t = ClusterTopology::reference();
        t.inter_node_bandwidth = 1e12;
        assert!(t.validate().is_err());
        let mut t = ClusterTopology::reference();
        t.learner_gpus = vec![99];
        assert!(t.validate().is_err());
    }
}
