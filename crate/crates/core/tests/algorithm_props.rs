mod common;

use common::*;
use proptest::prelude::*;
use rolloutsim::dedup::{dedup_savings, select_prefix_length, PrefillCapacity, PrefixIndex};
use rolloutsim::placement::{overlap_slacks, place_groups, ClusterTopology, TransferSizes};
use rolloutsim::planner::{assign, estimate_actor_time, ActorGroup, PlannedPrompt, PlanningBatch};
use rolloutsim::profile::LatencyProfile;
use rolloutsim::workload::Prompt;

fn to_prompts(seqs: &[Vec<u32>]) -> Vec<Prompt> {
    seqs.iter().enumerate().map(|(i, s)| prompt(&format!("p{i:02}"), s.clone())).collect()
}

fn small_batch() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..3, 1..=12), 1..=20)
}

fn batch_of(preds: &[(f64, usize)], g: usize) -> PlanningBatch {
    PlanningBatch {
        step_idx: 0,
        prompts: preds
            .iter()
            .enumerate()
            .map(|(i, &(p, l))| PlannedPrompt {
                prompt_id: format!("p{i:02}").into(),
                predicted_len: p,
                prompt_len: l,
            })
            .collect(),
        responses_per_prompt: g,
    }
}

proptest! {
    #[test]
    fn unique_prefix_counts_match_pairwise_oracle(seqs in small_batch()) {
        let prompts = to_prompts(&seqs);
        let index = PrefixIndex::build(&prompts).unwrap();
        for l in 0..=13 {
            prop_assert_eq!(index.unique_prefix_count(l), oracle_unique_prefixes(&seqs, l), "L = {}", l);
        }
    }

    #[test]
    fn selected_length_is_feasible_and_maximal(seqs in small_batch(), b in 1usize..25) {
        let prompts = to_prompts(&seqs);
        let index = PrefixIndex::build(&prompts).unwrap();
        let (lo, hi) = (index.min_len(), index.max_len());
        let choice = select_prefix_length(&index, &PrefillCapacity::new(b, 1).unwrap(), lo, hi).unwrap();
        if !choice.capacity_exceeded {
            prop_assert!(index.unique_prefix_count(choice.length) <= b);
            prop_assert!(choice.length == hi || index.unique_prefix_count(choice.length + 1) > b);
        } else {
            prop_assert_eq!(choice.length, lo);
            prop_assert!((lo..=hi).all(|l| index.unique_prefix_count(l) > b));
        }
    }

    #[test]
    fn dedup_never_exceeds_raw(seqs in small_batch(), g in 1usize..5, l in 0usize..14) {
        let index = PrefixIndex::build(&to_prompts(&seqs)).unwrap();
        let s = dedup_savings(&index, l, g);
        prop_assert!(s.dedup_prefill_tokens <= s.raw_prefill_tokens);
        if g > 1 {
            prop_assert!(s.dedup_prefill_tokens < s.raw_prefill_tokens);
        }
    }

    #[test]
    fn assignment_is_invariant_to_positive_scaling(
        preds in prop::collection::vec(1.0f64..2000.0, 1..40),
        n in 1usize..6,
        k in 0.01f64..100.0,
    ) {
        let n = n.min(preds.len());
        let a: Vec<(f64, usize)> = preds.iter().map(|&p| (p, 8)).collect();
        let b: Vec<(f64, usize)> = preds.iter().map(|&p| (p * k, 8)).collect();
        let ga = assign(&batch_of(&a, 1), n, 1).unwrap();
        let gb = assign(&batch_of(&b, 1), n, 1).unwrap();
        let ids = |gs: &[ActorGroup]| gs.iter().map(|g| g.prompt_ids().cloned().collect::<Vec<_>>()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&ga), ids(&gb));
    }

    #[test]
    fn closed_form_time_matches_token_loop(
        members in prop::collection::vec((1.0f64..600.0, 1usize..400), 1..6),
        g in 1usize..5,
    ) {
        let profile = LatencyProfile::reference();
        let group = ActorGroup {
            actor_id: 0,
            members: batch_of(&members, g).prompts,
            responses_per_prompt: g,
            gpu_count: 2,
        };
        let pairs: Vec<(u64, usize)> = members.iter().map(|&(p, l)| (planned(p), l)).collect();
        let est = estimate_actor_time(&group, &profile);
        let oracle = oracle_actor_time(&pairs, g, &profile);
        prop_assert!((est - oracle).abs() <= 1e-9 * oracle.max(1.0), "{} vs {}", est, oracle);
    }

    #[test]
    fn placement_latencies_are_scale_invariant(
        times in prop::collection::vec(0.1f64..50.0, 1..6),
        kv in prop::collection::vec(0.0f64..1e9, 6),
        model in 1e8f64..1e10,
        k in 0.001f64..1000.0,
    ) {
        let n = times.len();
        let groups: Vec<ActorGroup> = (0..n)
            .map(|actor_id| ActorGroup { actor_id, members: vec![], responses_per_prompt: 1, gpu_count: 2 })
            .collect();
        let topo = ClusterTopology::uniform(3, 4, 64e9, 12.5e9, 2);
        let mut scaled = topo.clone();
        scaled.intra_node_bandwidth *= k;
        scaled.inter_node_bandwidth *= k;
        let sizes = TransferSizes { model_bytes: model, kv_bytes: kv[..n].to_vec() };
        let big = TransferSizes { model_bytes: model * k, kv_bytes: kv[..n].iter().map(|b| b * k).collect() };
        let a = place_groups(&groups, &times, &topo, &sizes).unwrap();
        let b = place_groups(&groups, &times, &scaled, &big).unwrap();
        for (x, y) in a.actors.iter().zip(&b.actors) {
            prop_assert_eq!(x.node, y.node);
            prop_assert!((x.l_model - y.l_model).abs() <= 1e-12 * x.l_model.max(1e-300));
            prop_assert!((x.l_kv - y.l_kv).abs() <= 1e-12 * x.l_kv.max(1e-300));
        }
        // deterministic
        prop_assert_eq!(&a, &place_groups(&groups, &times, &topo, &sizes).unwrap());
    }

    #[test]
    fn zero_transfers_hide_behind_the_heaviest_actor(times in prop::collection::vec(0.0f64..100.0, 1..7), l_prefill in 0.0f64..5.0) {
        let n = times.len();
        let groups: Vec<ActorGroup> = (0..n)
            .map(|actor_id| ActorGroup { actor_id, members: vec![], responses_per_prompt: 1, gpu_count: 2 })
            .collect();
        let topo = ClusterTopology::uniform(4, 4, 64e9, 12.5e9, 2);
        let pp = place_groups(&groups, &times, &topo, &TransferSizes { model_bytes: 0.0, kv_bytes: vec![0.0; n] }).unwrap();
        for s in overlap_slacks(&pp, &times, l_prefill) {
            prop_assert!(s.slack >= 0.0);
        }
    }
}

#[test]
fn huge_kv_transfer_reports_negative_slack() {
    let groups: Vec<ActorGroup> = (0..2)
        .map(|actor_id| ActorGroup {
            actor_id,
            members: vec![],
            responses_per_prompt: 1,
            gpu_count: 2,
        })
        .collect();
    let topo = ClusterTopology::uniform(2, 4, 64e9, 12.5e9, 2);
    let sizes = TransferSizes {
        model_bytes: 0.0,
        kv_bytes: vec![0.0, 1e15],
    };
    let times = [10.0, 5.0];
    let pp = place_groups(&groups, &times, &topo, &sizes).unwrap();
    let slack = overlap_slacks(&pp, &times, 1.0);
    assert_eq!(slack.len(), 1);
    assert!(slack[0].slack < 0.0);
}

#[test]
fn three_group_cost_matches_hand_sum() {
    let profile = LatencyProfile::constant(0.02, 0.001, 2);
    let batch = batch_of(&[(100.0, 4), (50.0, 4), (20.0, 4), (10.0, 4), (5.0, 4), (1.0, 4)], 2);
    let groups = assign(&batch, 3, 2).unwrap();
    // group maxima 100, 20, 5 at 0.02 s/token on 2 GPUs each
    let expected = 0.001 * (2.0 * 0.02 * 100.0 + 2.0 * 0.02 * 20.0 + 2.0 * 0.02 * 5.0);
    let cost = rolloutsim::planner::estimate_cost(&groups, &profile);
    assert!((cost - expected).abs() < 1e-15, "{cost} vs {expected}");
}

#[test]
fn slowest_actor_time_versus_actor_count() {
    // reported rather than asserted: interpolation kinks can break strictness
    let profile = LatencyProfile::reference();
    let trace = rolloutsim::workload::generate_synthetic(&Default::default(), 3).unwrap();
    let preds: Vec<(f64, usize)> = trace
        .prompts()
        .map(|p| (p.ground_truth_len as f64, p.prompt_len()))
        .collect();
    let batch = batch_of(&preds, 4);
    let mut violations = 0;
    let mut last = f64::INFINITY;
    for n in 1..=8 {
        let t = assign(&batch, n, 2)
            .unwrap()
            .iter()
            .map(|g| estimate_actor_time(g, &profile))
            .fold(0.0, f64::max);
        if t > last {
            violations += 1;
            eprintln!("est_total_time rose from {last:.4} to {t:.4} at N = {n}");
        }
        last = t;
    }
    eprintln!("est_total_time monotonicity violations: {violations}");
}
