//! Batch rekeying: every join and leave collected over one interval is
//! handled by a single plan.
//!
//! All algorithms run on LKH groups. [`BatchAlgorithm::Balanced`] and its
//! improved variant also need a binary tree, since they rebuild the tree by
//! pairing subtrees.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keytree::{child_ids, first_child, is_ancestor_or_self, relabel, KeyTree, MemberId, NodeId};
use crate::schemes::{Content, GroupState, MemberState, RekeyMessage, RekeyPlan, Scheme};
use crate::symcrypto::{xor_terms, KeyTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Join,
    Leave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchAlgorithm {
    LamGouda,
    Balanced,
    LamGoudaImproved,
    BalancedImproved,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub joins: BTreeSet<MemberId>,
    pub leaves: BTreeSet<MemberId>,
    pub interval_index: u64,
}

impl BatchRequest {
    pub fn is_empty(&self) -> bool {
        self.joins.is_empty() && self.leaves.is_empty()
    }

    pub fn validate(&self, state: &GroupState) -> Result<()> {
        if let Some(m) = self.joins.intersection(&self.leaves).next() {
            return Err(Error::InvalidScenario(format!("{m} both joins and leaves in one batch")));
        }
        if let Some(m) = self.leaves.iter().find(|m| !state.tree().contains(**m)) {
            return Err(Error::MemberNotFound(*m));
        }
        if let Some(m) = self.joins.iter().find(|m| state.tree().contains(**m)) {
            return Err(Error::AlreadyMember(*m));
        }
        if self.joins.is_empty() && self.leaves.len() == state.len() {
            return Err(Error::EmptyGroup);
        }
        Ok(())
    }
}

/// Folds the events of one window into a request. A join and a leave of the
/// same member cancel, whatever their order.
pub fn collect<'a, I>(events: I, interval_index: u64) -> BatchRequest
where
    I: IntoIterator<Item = &'a (Op, MemberId)>,
{
    let mut joins = BTreeSet::new();
    let mut leaves = BTreeSet::new();
    for (op, m) in events {
        match op {
            Op::Join => joins.insert(*m),
            Op::Leave => leaves.insert(*m),
        };
    }
    let both: BTreeSet<MemberId> = joins.intersection(&leaves).copied().collect();
    BatchRequest {
        joins: &joins - &both,
        leaves: &leaves - &both,
        interval_index,
    }
}

pub fn batch_rekey(state: &mut GroupState, req: &BatchRequest, algorithm: BatchAlgorithm) -> Result<RekeyPlan> {
    match algorithm {
        BatchAlgorithm::LamGouda => lam_gouda_rekey(state, req),
        BatchAlgorithm::Balanced => balanced_batch_rekey(state, req).map(|(plan, _)| plan),
        BatchAlgorithm::LamGoudaImproved | BatchAlgorithm::BalancedImproved => {
            updating_factor_plan(state, req, algorithm)
        }
    }
}

fn require_lkh(state: &GroupState, binary: bool) -> Result<()> {
    match state.scheme() {
        Scheme::Lkh { degree } if !binary || degree == 2 => Ok(()),
        Scheme::Lkh { degree } => {
            Err(Error::InvalidParams(format!("balanced batch rekeying needs a binary tree, got degree {degree}")))
        }
        other => Err(Error::InvalidParams(format!("batch rekeying runs on LKH groups, not {other}"))),
    }
}

fn empty_plan(state: &GroupState) -> RekeyPlan {
    state.new_plan(Vec::new(), Vec::new(), None, BTreeMap::new(), BTreeMap::new(), BTreeSet::new())
}

/// Removes the leavers and returns their leaves in id order.
fn remove_leavers(state: &mut GroupState, req: &BatchRequest) -> Result<Vec<NodeId>> {
    let mut slots = Vec::new();
    for m in &req.leaves {
        slots.push(state.tree().leaf_of(*m)?);
        state.tree_mut().remove_member(*m)?;
    }
    slots.sort();
    Ok(slots)
}

fn place_joiner(state: &mut GroupState, m: MemberId, leaf: NodeId) -> Result<()> {
    state.tree_mut().place_at(m, leaf)?;
    let ind = state.fresh("ind");
    state.tree_mut().set_key(leaf, ind)
}

/// Fills the empty leaf `root` with `joiners`, as a balanced subtree when
/// there is more than one.
fn build_subtree(state: &mut GroupState, root: NodeId, joiners: &[MemberId]) -> Result<()> {
    match joiners {
        [] => Ok(()),
        [m] => place_joiner(state, *m, root),
        _ => {
            state.tree_mut().expand_leaf(root)?;
            spread(state, &child_ids(root, state.tree().degree()), joiners)
        }
    }
}

/// Splits `joiners` as evenly as possible over `slots`, leftmost first.
fn spread(state: &mut GroupState, slots: &[NodeId], joiners: &[MemberId]) -> Result<()> {
    let (q, r) = (joiners.len() / slots.len(), joiners.len() % slots.len());
    let mut rest = joiners;
    for (i, slot) in slots.iter().enumerate() {
        let take = q + usize::from(i < r);
        let (group, tail) = rest.split_at(take);
        build_subtree(state, *slot, group)?;
        rest = tail;
    }
    Ok(())
}

/// Nodes above `leaves`, bottom-up.
fn ancestors(state: &GroupState, leaves: impl IntoIterator<Item = NodeId>) -> Vec<NodeId> {
    let mut all = BTreeSet::new();
    for leaf in leaves {
        all.extend(state.tree().path_from(leaf).into_iter().skip(1));
    }
    state.bottom_up(all.into_iter().collect())
}

/// Joiners take departed leaves left to right; leftover departed leaves stay
/// empty. Surplus joiners first take existing vacancies, then form a subtree
/// grafted at the shallowest departed leaf, or the shallowest leaf when
/// nobody left.
pub fn lam_gouda_rekey(state: &mut GroupState, req: &BatchRequest) -> Result<RekeyPlan> {
    require_lkh(state, false)?;
    req.validate(state)?;
    if req.is_empty() {
        return Ok(empty_plan(state));
    }
    let pre = state.views();
    let slots = remove_leavers(state, req)?;
    let joiners: Vec<MemberId> = req.joins.iter().copied().collect();
    for (m, slot) in joiners.iter().zip(&slots) {
        place_joiner(state, *m, *slot)?;
    }
    let mut surplus: Vec<MemberId> = joiners.iter().skip(slots.len()).copied().collect();
    let mut renames = BTreeMap::new();
    let mut touched: Vec<NodeId> = slots.clone();

    while !surplus.is_empty() {
        let tree = state.tree();
        let vacancy = tree
            .leaves()
            .filter(|l| tree.occupants(*l).is_empty())
            .min_by_key(|l| (tree.depth(*l), *l));
        let Some(vacancy) = vacancy else { break };
        let m = surplus.remove(0);
        place_joiner(state, m, vacancy)?;
        touched.push(vacancy);
    }

    if !surplus.is_empty() {
        let tree = state.tree();
        let graft = match slots.iter().min_by_key(|l| (tree.depth(**l), **l)) {
            Some(slot) => *slot,
            None => tree.placement().values().copied().min_by_key(|l| (tree.depth(*l), *l)).ok_or(Error::EmptyGroup)?,
        };
        let occupant: Vec<MemberId> = tree.occupants(graft).into_iter().collect();
        let moved_to = state.tree_mut().split_leaf(graft)?;
        if occupant.iter().all(|m| !req.joins.contains(m)) {
            renames.insert(graft, moved_to);
        }
        let k = state.tree().degree();
        let slots: Vec<NodeId> = child_ids(graft, k).into_iter().skip(1).collect();
        spread(state, &slots, &surplus)?;
        touched.push(moved_to);
    }

    let joined: BTreeMap<MemberId, NodeId> =
        req.joins.iter().map(|m| state.tree().leaf_of(*m).map(|l| (*m, l))).collect::<Result<_>>()?;
    touched.extend(joined.values().copied());
    let dirtied = ancestors(state, touched);
    for &d in &dirtied {
        let key = state.fresh_node_key(d);
        state.tree_mut().set_key(d, key)?;
    }
    let messages = state.cover(&dirtied)?;
    let plan = state.new_plan(messages, dirtied, None, renames, joined, req.leaves.clone());
    state.finish(plan, &pre)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Shape {
    Old(NodeId),
    Joiner(MemberId),
    Pair(Box<Shape>, Box<Shape>),
}

#[derive(Debug, Clone)]
struct Elem {
    /// Grouping depth; may exceed the real height after a promotion.
    depth: u32,
    /// Old subtrees by root id first, then joiners by member id.
    rank: (u8, u64),
    shape: Shape,
}

/// Pairs elements of the lowest depth. An odd one out joins a tree one level
/// up, the result counting as two levels up; with no such tree it is promoted
/// by one level.
fn regroup(mut elems: Vec<Elem>) -> Option<Shape> {
    while elems.len() > 1 {
        let j = elems.iter().map(|e| e.depth).min()?;
        let (mut level, mut rest): (Vec<Elem>, Vec<Elem>) = elems.into_iter().partition(|e| e.depth == j);
        level.sort_by_key(|e| e.rank);
        let leftover = if level.len() % 2 == 1 { level.pop() } else { None };
        let mut it = level.into_iter();
        while let (Some(a), Some(b)) = (it.next(), it.next()) {
            rest.push(pair(a, b, j + 1));
        }
        if let Some(x) = leftover {
            let partner = rest
                .iter()
                .enumerate()
                .filter(|(_, e)| e.depth == j + 1)
                .min_by_key(|(_, e)| e.rank)
                .map(|(i, _)| i);
            match partner {
                Some(i) => {
                    let y = rest.remove(i);
                    let (a, b) = if y.rank < x.rank { (y, x) } else { (x, y) };
                    rest.push(pair(a, b, j + 2));
                }
                None => rest.push(Elem { depth: j + 1, ..x }),
            }
        }
        elems = rest;
    }
    elems.pop().map(|e| e.shape)
}

fn pair(a: Elem, b: Elem, depth: u32) -> Elem {
    Elem { depth, rank: a.rank.min(b.rank), shape: Shape::Pair(Box::new(a.shape), Box::new(b.shape)) }
}

/// Where the elements of a rebuilt tree end up.
#[derive(Debug, Default)]
struct Layout {
    /// `(old root, new root)` of each kept subtree.
    moved: Vec<(NodeId, NodeId)>,
    joiners: Vec<(MemberId, NodeId)>,
    pairs: Vec<NodeId>,
}

fn assign(shape: &Shape, at: NodeId, layout: &mut Layout) {
    match shape {
        Shape::Old(o) => layout.moved.push((*o, at)),
        Shape::Joiner(m) => layout.joiners.push((*m, at)),
        Shape::Pair(a, b) => {
            layout.pairs.push(at);
            let left = first_child(at, 2);
            assign(a, left, layout);
            assign(b, NodeId(left.0 + 1), layout);
        }
    }
}

/// Roots of the subtrees that survive pruning, with their heights. Pruning
/// removes every node on a leaver's path and on the path of an empty leaf.
fn fragments(tree: &KeyTree, leavers: &BTreeSet<MemberId>) -> Vec<(NodeId, u32)> {
    let k = tree.degree();
    let mut marked = BTreeSet::new();
    for leaf in tree.leaves() {
        let occ = tree.occupants(leaf);
        if occ.is_empty() || occ.iter().any(|m| leavers.contains(m)) {
            marked.extend(tree.path_from(leaf));
        }
    }
    let height = |root: NodeId| {
        tree.placement()
            .values()
            .filter(|l| is_ancestor_or_self(root, **l, k))
            .map(|l| tree.depth(*l) - tree.depth(root))
            .max()
            .unwrap_or(0)
    };
    if !marked.contains(&NodeId::ROOT) {
        return vec![(NodeId::ROOT, height(NodeId::ROOT))];
    }
    let mut out = Vec::new();
    for n in &marked {
        for c in child_ids(*n, k) {
            if tree.node(c).is_some() && !marked.contains(&c) && tree.has_members_under(c) {
                out.push((c, height(c)));
            }
        }
    }
    out
}

/// Result of rebuilding the tree; pair nodes are still keyless.
struct Rebuilt {
    pre: BTreeMap<MemberId, MemberState>,
    old: KeyTree,
    layout: Layout,
    renames: BTreeMap<NodeId, NodeId>,
    joined: BTreeMap<MemberId, NodeId>,
}

fn rebuild(state: &mut GroupState, req: &BatchRequest) -> Result<Rebuilt> {
    let pre = state.views();
    let old = state.tree().clone();
    let mut elems: Vec<Elem> = fragments(&old, &req.leaves)
        .into_iter()
        .map(|(root, depth)| Elem { depth, rank: (0, root.0), shape: Shape::Old(root) })
        .collect();
    elems.extend(req.joins.iter().map(|m| Elem { depth: 0, rank: (1, u64::from(m.0)), shape: Shape::Joiner(*m) }));
    let shape = regroup(elems).ok_or(Error::EmptyGroup)?;
    let mut layout = Layout::default();
    assign(&shape, NodeId::ROOT, &mut layout);

    let mut keys: BTreeMap<NodeId, Option<KeyTerm>> = BTreeMap::new();
    let mut placement = BTreeMap::new();
    for &(o, n) in &layout.moved {
        for node in old.nodes().filter(|x| is_ancestor_or_self(o, x.id, 2)) {
            keys.insert(relabel(node.id, o, n, 2), node.key.clone());
        }
        for (m, leaf) in old.placement().iter().filter(|(_, l)| is_ancestor_or_self(o, **l, 2)) {
            placement.insert(*m, relabel(*leaf, o, n, 2));
        }
    }
    for &(m, n) in &layout.joiners {
        keys.insert(n, Some(state.fresh("ind")));
        placement.insert(m, n);
    }
    for &p in &layout.pairs {
        keys.insert(p, None);
    }
    let tree = KeyTree::from_layout(2, keys, placement, 1, old.version() + 1)?;
    state.replace_tree(tree);
    let renames = layout.moved.iter().filter(|(o, n)| o != n).copied().collect();
    let joined = layout.joiners.iter().copied().collect();
    Ok(Rebuilt { pre, old, layout, renames, joined })
}

/// Marks leaver paths, prunes them, regroups the surviving subtrees with the
/// joiners and rekeys the new interior nodes. Returns the plan and the
/// subtree renames it carries.
pub fn balanced_batch_rekey(state: &mut GroupState, req: &BatchRequest) -> Result<(RekeyPlan, BTreeMap<NodeId, NodeId>)> {
    require_lkh(state, true)?;
    req.validate(state)?;
    if req.is_empty() {
        return Ok((empty_plan(state), BTreeMap::new()));
    }
    let rebuilt = rebuild(state, req)?;
    for &p in &rebuilt.layout.pairs {
        let key = state.fresh_node_key(p);
        state.tree_mut().set_key(p, key)?;
    }
    let dirtied = state.bottom_up(rebuilt.layout.pairs.clone());
    let mut messages = state.cover(&dirtied)?;
    mark_positions(&mut messages, &rebuilt.layout);
    let renames = rebuilt.renames.clone();
    let plan = state.new_plan(messages, dirtied, None, rebuilt.renames, rebuilt.joined, req.leaves.clone());
    Ok((state.finish(plan, &rebuilt.pre)?, renames))
}

/// Tags messages sent under the root key of a placed element with the
/// element's new position.
fn mark_positions(messages: &mut [RekeyMessage], layout: &Layout) {
    let roots: BTreeSet<NodeId> =
        layout.moved.iter().map(|(_, n)| *n).chain(layout.joiners.iter().map(|(_, n)| *n)).collect();
    for msg in messages {
        if let Some(c) = msg.enc_node.filter(|c| roots.contains(c)) {
            msg.new_position = Some(c);
        }
    }
}

/// Batch rekeying that ships an XOR updating factor instead of new keys
/// wherever members can derive them.
///
/// `LamGoudaImproved` keeps every member in place, so it rejects batches with
/// more joins than leaves. `BalancedImproved` rebuilds the tree like
/// [`balanced_batch_rekey`]; a new interior node that sits where an old one
/// was, over the same surviving members and no joiners, gets the old key XOR
/// the factor.
pub fn updating_factor_plan(state: &mut GroupState, req: &BatchRequest, variant: BatchAlgorithm) -> Result<RekeyPlan> {
    match variant {
        BatchAlgorithm::LamGoudaImproved => lam_gouda_improved(state, req),
        BatchAlgorithm::BalancedImproved => balanced_improved(state, req),
        other => Err(Error::InvalidParams(format!("{other:?} does not use an updating factor"))),
    }
}

fn lam_gouda_improved(state: &mut GroupState, req: &BatchRequest) -> Result<RekeyPlan> {
    require_lkh(state, false)?;
    req.validate(state)?;
    if req.joins.len() > req.leaves.len() {
        return Err(Error::InvalidParams(
            "more joins than leaves would move members; the updating-factor variant keeps positions fixed".into(),
        ));
    }
    if req.is_empty() {
        return Ok(empty_plan(state));
    }
    let pre = state.views();
    let slots = remove_leavers(state, req)?;
    let mut joined = BTreeMap::new();
    for (m, slot) in req.joins.iter().zip(&slots) {
        place_joiner(state, *m, *slot)?;
        joined.insert(*m, *slot);
    }
    let dirtied = ancestors(state, slots.iter().copied());
    let dirty: BTreeSet<NodeId> = dirtied.iter().copied().collect();
    let touched: BTreeSet<NodeId> = slots.iter().copied().collect();
    let factor = state.fresh("D");
    let k = state.tree().degree();
    let mut messages = Vec::new();
    for &d in &dirtied {
        for c in child_ids(d, k) {
            let tree = state.tree();
            if tree.node(c).is_some() && !dirty.contains(&c) && !touched.contains(&c) && tree.has_members_under(c) {
                messages.push(state.under_node(factor.clone(), c, d, Content::Factor)?);
            }
        }
    }
    for &d in &dirtied {
        let old = state.tree().key(d).cloned().ok_or(Error::NodeNotFound(d))?;
        state.tree_mut().set_key(d, xor_terms(&old, &factor))?;
    }
    for &leaf in joined.values() {
        for d in state.tree().path_from(leaf).into_iter().skip(1) {
            let key = state.tree().key(d).cloned().ok_or(Error::NodeNotFound(d))?;
            messages.push(state.under_node(key, leaf, d, Content::NodeKey)?);
        }
    }
    let mut plan = state.new_plan(messages, dirtied, None, BTreeMap::new(), joined, req.leaves.clone());
    plan.xor_nodes = dirty;
    state.finish(plan, &pre)
}

fn balanced_improved(state: &mut GroupState, req: &BatchRequest) -> Result<RekeyPlan> {
    require_lkh(state, true)?;
    req.validate(state)?;
    if req.is_empty() {
        return Ok(empty_plan(state));
    }
    let rebuilt = rebuild(state, req)?;
    let factor = state.fresh("D");
    let joiners: BTreeSet<MemberId> = req.joins.clone();
    let mut preserved = BTreeSet::new();
    for &p in &rebuilt.layout.pairs {
        let new_members = state.tree().subtree_members(p)?;
        let Some(old_key) = rebuilt.old.key(p).cloned() else { continue };
        if rebuilt.old.is_leaf(p) || new_members.iter().any(|m| joiners.contains(m)) {
            continue;
        }
        let survivors: BTreeSet<MemberId> =
            rebuilt.old.subtree_members(p)?.into_iter().filter(|m| !req.leaves.contains(m)).collect();
        if survivors == new_members {
            preserved.insert(p);
            state.tree_mut().set_key(p, xor_terms(&old_key, &factor))?;
        }
    }
    for &p in rebuilt.layout.pairs.iter().filter(|p| !preserved.contains(p)) {
        let key = state.fresh_node_key(p);
        state.tree_mut().set_key(p, key)?;
    }
    let fresh: Vec<NodeId> = rebuilt.layout.pairs.iter().copied().filter(|p| !preserved.contains(p)).collect();
    let fresh = state.bottom_up(fresh);
    let mut messages = Vec::new();
    // one factor per kept subtree below a preserved node
    for &(_, n) in &rebuilt.layout.moved {
        let lowest = state.tree().path_from(n).into_iter().skip(1).find(|a| preserved.contains(a));
        if let Some(target) = lowest {
            messages.push(state.under_node(factor.clone(), n, target, Content::Factor)?);
        }
    }
    messages.extend(state.cover(&fresh)?);
    mark_positions(&mut messages, &rebuilt.layout);
    let dirtied = state.bottom_up(rebuilt.layout.pairs.clone());
    let mut plan = state.new_plan(messages, dirtied, None, rebuilt.renames, rebuilt.joined, req.leaves.clone());
    plan.xor_nodes = preserved;
    state.finish(plan, &rebuilt.pre)
}

#[cfg(test)]
mod tests;
