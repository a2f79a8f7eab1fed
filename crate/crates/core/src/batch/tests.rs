use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;
use crate::keytree::{ceil_log, level_label, KeyTree};
use crate::schemes::{apply_plan_member, init_group, MemberState};

fn ids(v: &[u32]) -> BTreeSet<MemberId> {
    v.iter().copied().map(MemberId).collect()
}

fn lkh(n: u32, k: usize) -> (GroupState, BTreeMap<MemberId, MemberState>) {
    let members: Vec<MemberId> = (1..=n).map(MemberId).collect();
    init_group(Scheme::Lkh { degree: k }, &members).unwrap()
}

fn request(joins: &[u32], leaves: &[u32]) -> BatchRequest {
    BatchRequest { joins: ids(joins), leaves: ids(leaves), interval_index: 0 }
}

fn advance(state: &GroupState, views: &mut BTreeMap<MemberId, MemberState>, plan: &RekeyPlan) {
    for m in &plan.departed {
        views.remove(m);
    }
    for m in plan.joined.keys() {
        views.insert(*m, state.joiner_view(*m).unwrap());
    }
    for (m, v) in views.iter_mut() {
        *v = apply_plan_member(v, plan);
        assert_eq!(*v, state.member_view(*m).unwrap(), "member {m} out of sync");
    }
    assert_eq!(views.len(), state.len());
}

/// Minimal number of ciphertexts so that exactly the members below each
/// dirtied node learn its key, searching over every usable key below it.
fn min_cover_oracle(old: &KeyTree, leavers: &BTreeSet<MemberId>, dirtied: &BTreeSet<NodeId>) -> usize {
    let k = old.degree();
    fn cost(tree: &KeyTree, n: NodeId, k: usize, leavers: &BTreeSet<MemberId>, dirtied: &BTreeSet<NodeId>) -> usize {
        let members: BTreeSet<MemberId> = tree.subtree_members(n).unwrap().difference(leavers).copied().collect();
        if members.is_empty() {
            return 0;
        }
        let compromised = tree.subtree_members(n).unwrap().iter().any(|m| leavers.contains(m));
        // an uncompromised key or a freshly replaced one reaches the whole subtree at once
        if !compromised || dirtied.contains(&n) {
            return 1;
        }
        child_ids(n, k).into_iter().filter(|c| tree.node(*c).is_some()).map(|c| cost(tree, c, k, leavers, dirtied)).sum()
    }
    dirtied
        .iter()
        .map(|d| {
            child_ids(*d, k)
                .into_iter()
                .filter(|c| old.node(*c).is_some())
                .map(|c| cost(old, c, k, leavers, dirtied))
                .sum::<usize>()
        })
        .sum()
}

#[test]
fn collect_cancels_pairs() {
    let a = MemberId(40);
    assert!(collect(&[(Op::Join, a), (Op::Leave, a)], 0).is_empty());
    assert!(collect(&[(Op::Leave, a), (Op::Join, a)], 0).is_empty());
    let r = collect(&[(Op::Leave, MemberId(2)), (Op::Leave, MemberId(6))], 3);
    assert_eq!(r.leaves, ids(&[2, 6]));
    assert_eq!(r.interval_index, 3);
    let r = collect(&[(Op::Join, MemberId(20)), (Op::Join, MemberId(21)), (Op::Leave, MemberId(3))], 0);
    assert_eq!((r.joins, r.leaves), (ids(&[20, 21]), ids(&[3])));
}

#[test]
fn request_validation() {
    let (state, _) = lkh(4, 2);
    assert_eq!(request(&[], &[9]).validate(&state), Err(Error::MemberNotFound(MemberId(9))));
    assert_eq!(request(&[1], &[]).validate(&state), Err(Error::AlreadyMember(MemberId(1))));
    assert_eq!(request(&[], &[1, 2, 3, 4]).validate(&state), Err(Error::EmptyGroup));
    assert!(matches!(request(&[9], &[9]).validate(&state), Err(Error::InvalidScenario(_))));
    let (mut ternary, _) = lkh(9, 3);
    assert!(matches!(balanced_batch_rekey(&mut ternary, &request(&[], &[1])), Err(Error::InvalidParams(_))));
    let (mut ihc, _) = init_group(Scheme::Ihc { degree: 2 }, &[MemberId(1), MemberId(2)]).unwrap();
    assert!(matches!(lam_gouda_rekey(&mut ihc, &request(&[], &[1])), Err(Error::InvalidParams(_))));
}

#[test]
fn lam_gouda_two_leavers() {
    let (mut state, mut views) = lkh(8, 2);
    let old = state.tree().clone();
    let req = request(&[], &[2, 6]);
    let plan = lam_gouda_rekey(&mut state, &req).unwrap();
    let dirtied: BTreeSet<String> = plan.dirtied.iter().map(|n| level_label(*n, 2)).collect();
    let expect: BTreeSet<String> =
        ["K_{2,1}", "K_{1,1}", "K_{2,3}", "K_{1,2}", "K_0"].into_iter().map(String::from).collect();
    assert_eq!(dirtied, expect);
    assert_eq!(plan.payload_keys(), 8);
    let dirty: BTreeSet<NodeId> = plan.dirtied.iter().copied().collect();
    assert_eq!(min_cover_oracle(&old, &req.leaves, &dirty), 8);
    assert_eq!(plan.messages[0].enc_node, Some(NodeId(7)));
    for leaver in &req.leaves {
        let held = views[leaver].held();
        assert!(plan.enc_keys().all(|k| !held.contains(k)));
    }
    advance(&state, &mut views, &plan);
}

#[test]
fn lam_gouda_swap_costs_one_more_than_a_leave() {
    let (mut single, _) = lkh(8, 2);
    let leave = single.plan_leave(MemberId(3)).unwrap();
    let (mut state, mut views) = lkh(8, 2);
    let plan = lam_gouda_rekey(&mut state, &request(&[20], &[3])).unwrap();
    assert_eq!(plan.joined[&MemberId(20)], NodeId(9));
    // the newcomer needs its own copy of the lowest key
    assert_eq!(plan.messages.len(), leave.messages.len() + 1);
    advance(&state, &mut views, &plan);
}

#[test]
fn lam_gouda_grafts_surplus() {
    let (mut state, mut views) = lkh(8, 2);
    let plan = lam_gouda_rekey(&mut state, &request(&[20, 21], &[])).unwrap();
    assert_eq!(plan.renames, BTreeMap::from([(NodeId(7), NodeId(15))]));
    assert_eq!(state.tree().leaf_of(MemberId(1)), Ok(NodeId(15)));
    assert!(plan.joined.values().all(|l| is_ancestor_or_self(NodeId(16), *l, 2)));
    advance(&state, &mut views, &plan);

    // departures first: two joiners fill the slots, the third grafts at the shallowest
    let (mut state, mut views) = lkh(6, 2);
    let plan = lam_gouda_rekey(&mut state, &request(&[20, 21, 22, 23], &[2, 5])).unwrap();
    assert_eq!(state.len(), 8);
    assert!(plan.renames.is_empty());
    advance(&state, &mut views, &plan);
}

#[test]
fn regroup_rule() {
    let e = |d: u32, r: u64| Elem { depth: d, rank: (0, r), shape: Shape::Old(NodeId(r)) };
    let s = regroup(vec![e(0, 1), e(0, 2)]).unwrap();
    assert_eq!(s, Shape::Pair(Box::new(Shape::Old(NodeId(1))), Box::new(Shape::Old(NodeId(2)))));
    let s = regroup(vec![e(0, 1), e(0, 2), e(0, 3)]).unwrap();
    let pair12 = Shape::Pair(Box::new(Shape::Old(NodeId(1))), Box::new(Shape::Old(NodeId(2))));
    assert_eq!(s, Shape::Pair(Box::new(pair12), Box::new(Shape::Old(NodeId(3)))));
    assert_eq!(regroup(vec![e(2, 5)]), Some(Shape::Old(NodeId(5))));
    assert_eq!(regroup(vec![]), None);
}

#[test]
fn balanced_two_leavers() {
    let (mut state, mut views) = lkh(8, 2);
    let (plan, renames) = balanced_batch_rekey(&mut state, &request(&[], &[2, 6])).unwrap();
    assert_eq!(state.len(), 6);
    assert_eq!(state.tree().height(), ceil_log(6, 2));
    let placed: BTreeSet<NodeId> = state.tree().placement().values().copied().collect();
    assert_eq!(placed.len(), 6);
    assert_eq!(renames, plan.renames);
    assert!(plan.messages.iter().any(|m| m.new_position.is_some()));
    advance(&state, &mut views, &plan);
}

#[test]
fn improved_variants() {
    let (mut state, mut views) = lkh(8, 2);
    let plan = updating_factor_plan(&mut state, &request(&[], &[2, 6]), BatchAlgorithm::LamGoudaImproved).unwrap();
    assert!(plan.payload_keys() < 8);
    advance(&state, &mut views, &plan);

    let (mut state, _) = lkh(8, 2);
    let r = updating_factor_plan(&mut state, &request(&[20, 21], &[1]), BatchAlgorithm::LamGoudaImproved);
    assert!(matches!(r, Err(Error::InvalidParams(_))));
    let plan = updating_factor_plan(&mut state, &request(&[], &[]), BatchAlgorithm::LamGoudaImproved).unwrap();
    assert!(plan.messages.is_empty());
    assert!(updating_factor_plan(&mut state, &request(&[], &[1]), BatchAlgorithm::Balanced).is_err());

    // both leavers under K_{2,1}: the root keeps its members and takes the factor
    let (mut state, mut views) = lkh(8, 2);
    let old_root = state.group_key().cloned().unwrap();
    let plan = updating_factor_plan(&mut state, &request(&[], &[1, 2]), BatchAlgorithm::BalancedImproved).unwrap();
    assert_eq!(plan.xor_nodes, BTreeSet::from([NodeId::ROOT]));
    let d = plan.messages.iter().find(|m| m.content == Content::Factor).unwrap().ciphertext.payload[0].clone();
    assert_eq!(state.group_key(), Some(&xor_terms(&old_root, &d)));
    advance(&state, &mut views, &plan);
}

#[test]
fn lam_gouda_improved_matches_sdlkh_leave() {
    for k in [2usize, 3] {
        for h in 1..=4u32 {
            let n = (k as u32).pow(h);
            for victim in [1, n / 2 + 1, n] {
                let members: Vec<MemberId> = (1..=n).map(MemberId).collect();
                let (mut sd, _) = init_group(Scheme::SdLkh { degree: k }, &members).unwrap();
                let expect = sd.plan_leave(MemberId(victim)).unwrap().messages.len();
                let (mut state, mut views) = lkh(n, k);
                let plan =
                    updating_factor_plan(&mut state, &request(&[], &[victim]), BatchAlgorithm::LamGoudaImproved)
                        .unwrap();
                assert_eq!(plan.messages.len(), expect, "k={k} h={h} victim={victim}");
                advance(&state, &mut views, &plan);
            }
        }
    }
}

fn batch_strategy() -> impl Strategy<Value = (u32, Vec<u32>, u32, u64)> {
    (2u32..=128).prop_flat_map(|n| {
        (Just(n), prop::sample::subsequence((1..=n).collect::<Vec<_>>(), 0..n as usize), 0u32..12, any::<u64>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn balanced_batches_stay_balanced((n, leaves, joins, _) in batch_strategy()) {
        let (mut state, mut views) = lkh(n, 2);
        let joins: Vec<u32> = (1000..1000 + joins).collect();
        let req = request(&joins, &leaves);
        prop_assume!(req.validate(&state).is_ok());
        let (plan, renames) = balanced_batch_rekey(&mut state, &req).unwrap();
        let size = state.len() as u64;
        prop_assert!(state.tree().height() <= ceil_log(size, 2) + 1);
        let targets: BTreeSet<NodeId> = renames.values().copied().collect();
        prop_assert_eq!(targets.len(), renames.len());
        advance(&state, &mut views, &plan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn every_algorithm_keeps_members_in_sync(
        (n, leaves, joins, seed) in batch_strategy(),
        rounds in 1usize..4,
    ) {
        for algorithm in [
            BatchAlgorithm::LamGouda,
            BatchAlgorithm::Balanced,
            BatchAlgorithm::LamGoudaImproved,
            BatchAlgorithm::BalancedImproved,
        ] {
            let (mut state, mut views) = lkh(n, 2);
            let mut next = 1000;
            for round in 0..rounds {
                let current: Vec<MemberId> = state.members().collect();
                let mut leave_set: BTreeSet<MemberId> = leaves
                    .iter()
                    .map(|i| current[(*i as usize + round * (seed % 7) as usize) % current.len()])
                    .collect();
                let mut join_count = joins as usize;
                if algorithm == BatchAlgorithm::LamGoudaImproved {
                    join_count = join_count.min(leave_set.len());
                }
                if leave_set.len() == current.len() && join_count == 0 {
                    leave_set.pop_first();
                }
                let req = BatchRequest {
                    joins: (next..next + join_count as u32).map(MemberId).collect(),
                    leaves: leave_set,
                    interval_index: round as u64,
                };
                next += join_count as u32;
                let plan = batch_rekey(&mut state, &req, algorithm).unwrap();
                advance(&state, &mut views, &plan);
            }
        }
    }

    #[test]
    fn lam_gouda_batch_not_worse_than_sequential((n, leaves, joins, _) in batch_strategy()) {
        let (mut batch, _) = lkh(n, 2);
        let joins: Vec<u32> = (1000..1000 + joins).collect();
        let req = request(&joins, &leaves);
        prop_assume!(req.validate(&batch).is_ok());
        let mut seq = batch.clone();
        let plan = lam_gouda_rekey(&mut batch, &req).unwrap();
        let mut total = 0;
        for m in &req.joins {
            total += seq.plan_join(*m).unwrap().payload_keys();
        }
        for m in &req.leaves {
            total += seq.plan_leave(*m).unwrap().payload_keys();
        }
        prop_assert!(plan.payload_keys() <= total, "batch {} > sequential {}", plan.payload_keys(), total);
    }
}
