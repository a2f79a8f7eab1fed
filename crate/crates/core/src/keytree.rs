//! Degree-`k` key tree with top-down, left-to-right node numbering.
//!
//! The root is node 0 and the children of node `m` are `k*m+1 ..= k*m+k`, so
//! parent and child lookups are arithmetic and the tree is stored as a map from
//! [`NodeId`] to [`KeyNode`] with no links.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symcrypto::{KeySource, KeyTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberId(pub u32);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.0)
    }
}

pub fn parent_id(m: NodeId, k: usize) -> Result<NodeId> {
    if m.0 == 0 {
        return Err(Error::RootHasNoParent);
    }
    Ok(NodeId((m.0 - 1) / k as u64))
}

pub fn child_ids(m: NodeId, k: usize) -> Vec<NodeId> {
    let k = k as u64;
    (1..=k).map(|i| NodeId(k * m.0 + i)).collect()
}

pub fn first_child(m: NodeId, k: usize) -> NodeId {
    NodeId(k as u64 * m.0 + 1)
}

pub fn depth_of(mut m: NodeId, k: usize) -> u32 {
    let mut d = 0;
    while m.0 != 0 {
        m = NodeId((m.0 - 1) / k as u64);
        d += 1;
    }
    d
}

/// First node id on level `depth`, i.e. `(k^depth - 1) / (k - 1)`.
pub fn first_id_at_depth(depth: u32, k: usize) -> u64 {
    let k = k as u64;
    (0..depth).fold(0u64, |acc, _| acc * k + 1)
}

/// `K_{level,index}` label with a 1-based index within the level.
pub fn level_label(m: NodeId, k: usize) -> String {
    if m.0 == 0 {
        return "K_0".to_string();
    }
    let d = depth_of(m, k);
    format!("K_{{{},{}}}", d, m.0 - first_id_at_depth(d, k) + 1)
}

pub fn is_ancestor_or_self(ancestor: NodeId, mut node: NodeId, k: usize) -> bool {
    loop {
        if node == ancestor {
            return true;
        }
        if node.0 == 0 || node.0 < ancestor.0 {
            return false;
        }
        node = NodeId((node.0 - 1) / k as u64);
    }
}

/// Position of `node` after the subtree rooted at `old_root` is moved to `new_root`.
/// `node` must lie in that subtree.
pub fn relabel(node: NodeId, old_root: NodeId, new_root: NodeId, k: usize) -> NodeId {
    let k64 = k as u64;
    let mut digits = Vec::new();
    let mut n = node;
    while n != old_root {
        digits.push((n.0 - 1) % k64);
        n = NodeId((n.0 - 1) / k64);
    }
    digits.iter().rev().fold(new_root, |m, d| NodeId(k64 * m.0 + 1 + d))
}

/// Smallest `h` with `k^h >= n`.
pub fn ceil_log(n: u64, k: usize) -> u32 {
    let mut h = 0;
    let mut cap = 1u64;
    while cap < n {
        cap *= k as u64;
        h += 1;
    }
    h
}

/// `log_k n` when `n` is an exact power of `k`.
pub fn exact_log(n: u64, k: usize) -> Option<u32> {
    let h = ceil_log(n, k);
    ((k as u64).pow(h) == n).then_some(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    TekRoot,
    Kek,
    IndividualLeaf,
    ClusterLeaf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyNode {
    pub id: NodeId,
    /// `None` for vacant leaves; a vacated leaf's key is retired for good.
    pub key: Option<KeyTerm>,
    pub kind: NodeKind,
    pub key_version: u64,
}

/// What to do when a join finds no leaf with room.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    /// Split the shallowest occupied leaf into a KEK over the old occupant and the newcomer.
    Split,
    /// Raise the degree of a height-one tree by one (star layouts).
    Widen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub leaf: NodeId,
    /// `(split leaf, where its occupants moved)` when the join split a leaf.
    pub split: Option<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyTree {
    degree: usize,
    nodes: BTreeMap<NodeId, KeyNode>,
    placement: BTreeMap<MemberId, NodeId>,
    occupants: BTreeMap<NodeId, BTreeSet<MemberId>>,
    leaf_capacity: usize,
    growth: Growth,
    version: u64,
}

impl KeyTree {
    fn check_degree(k: usize) -> Result<()> {
        if k < 2 {
            return Err(Error::InvalidParams(format!("tree degree must be at least 2, got {k}")));
        }
        Ok(())
    }

    fn check_unique(members: &[MemberId]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in members {
            if !seen.insert(*m) {
                return Err(Error::AlreadyMember(*m));
            }
        }
        Ok(())
    }

    fn empty(degree: usize, leaf_capacity: usize, growth: Growth) -> Self {
        KeyTree {
            degree,
            nodes: BTreeMap::new(),
            placement: BTreeMap::new(),
            occupants: BTreeMap::new(),
            leaf_capacity,
            growth,
            version: 0,
        }
    }

    /// Full tree of height `h` whose leaves are filled left to right with
    /// `leaf_capacity` members each; trailing leaves stay vacant.
    fn build_full(
        members: &[MemberId],
        k: usize,
        leaf_capacity: usize,
        growth: Growth,
        keys: &mut KeySource,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyGroup);
        }
        Self::check_degree(k)?;
        Self::check_unique(members)?;
        let leaves_needed = members.len().div_ceil(leaf_capacity) as u64;
        let h = ceil_log(leaves_needed, k);
        let first_leaf = first_id_at_depth(h, k);
        let total = first_id_at_depth(h + 1, k);
        let mut tree = Self::empty(k, leaf_capacity, growth);
        for (i, chunk) in members.chunks(leaf_capacity).enumerate() {
            let leaf = NodeId(first_leaf + i as u64);
            for m in chunk {
                tree.placement.insert(*m, leaf);
                tree.occupants.entry(leaf).or_default().insert(*m);
            }
        }
        for id in 0..total {
            let id = NodeId(id);
            let is_leaf = id.0 >= first_leaf;
            let key = if !is_leaf {
                Some(keys.fresh_key(if id.0 == 0 { "tek" } else { "kek" }))
            } else if tree.occupants.contains_key(&id) {
                Some(keys.fresh_key(if leaf_capacity > 1 { "cluster" } else { "ind" }))
            } else {
                None
            };
            let kind = tree.kind_for(id, is_leaf);
            tree.nodes.insert(id, KeyNode { id, key, kind, key_version: 0 });
        }
        Ok(tree)
    }

    /// Balanced tree of minimal height `ceil(log_k n)`, one member per leaf.
    pub fn build_balanced(members: &[MemberId], k: usize, keys: &mut KeySource) -> Result<Self> {
        Self::build_full(members, k, 1, Growth::Split, keys)
    }

    /// Hybrid layout: clusters of up to `cluster_size` members share one leaf.
    pub fn build_clustered(
        members: &[MemberId],
        arity: usize,
        cluster_size: usize,
        keys: &mut KeySource,
    ) -> Result<Self> {
        if cluster_size == 0 {
            return Err(Error::InvalidParams("cluster size must be at least 1".into()));
        }
        Self::build_full(members, arity, cluster_size, Growth::Split, keys)
    }

    /// Height-one tree: one group key over one individual key per member.
    pub fn build_star(members: &[MemberId], keys: &mut KeySource) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyGroup);
        }
        Self::check_unique(members)?;
        let k = members.len().max(2);
        let mut tree = Self::empty(k, 1, Growth::Widen);
        tree.nodes.insert(
            NodeId::ROOT,
            KeyNode { id: NodeId::ROOT, key: Some(keys.fresh_key("tek")), kind: NodeKind::TekRoot, key_version: 0 },
        );
        for i in 1..=k as u64 {
            let id = NodeId(i);
            let key = members.get(i as usize - 1).map(|m| {
                tree.placement.insert(*m, id);
                tree.occupants.entry(id).or_default().insert(*m);
                keys.fresh_key("ind")
            });
            tree.nodes.insert(id, KeyNode { id, key, kind: NodeKind::IndividualLeaf, key_version: 0 });
        }
        Ok(tree)
    }

    /// Reassembles a tree from a node/key layout and member placement. Node
    /// kinds are recomputed from the layout.
    pub fn from_layout(
        degree: usize,
        keys: BTreeMap<NodeId, Option<KeyTerm>>,
        placement: BTreeMap<MemberId, NodeId>,
        leaf_capacity: usize,
        version: u64,
    ) -> Result<Self> {
        Self::check_degree(degree)?;
        let mut tree = Self::empty(degree, leaf_capacity, Growth::Split);
        tree.version = version;
        for (id, key) in keys {
            tree.nodes.insert(id, KeyNode { id, key, kind: NodeKind::Kek, key_version: 0 });
        }
        for (m, leaf) in placement {
            if !tree.nodes.contains_key(&leaf) {
                return Err(Error::NodeNotFound(leaf));
            }
            tree.placement.insert(m, leaf);
            tree.occupants.entry(leaf).or_default().insert(m);
        }
        let ids: Vec<NodeId> = tree.nodes.keys().copied().collect();
        for id in ids {
            if id.0 != 0 && !tree.nodes.contains_key(&parent_id(id, degree)?) {
                return Err(Error::InternalInconsistency(format!("node {id} has no parent")));
            }
            tree.refresh_kind(id);
        }
        if !tree.nodes.contains_key(&NodeId::ROOT) {
            return Err(Error::NodeNotFound(NodeId::ROOT));
        }
        Ok(tree)
    }

    fn kind_for(&self, id: NodeId, is_leaf: bool) -> NodeKind {
        if id.0 == 0 {
            NodeKind::TekRoot
        } else if !is_leaf {
            NodeKind::Kek
        } else if self.leaf_capacity > 1 {
            NodeKind::ClusterLeaf
        } else {
            NodeKind::IndividualLeaf
        }
    }

    fn refresh_kind(&mut self, id: NodeId) {
        let is_leaf = self.is_leaf(id);
        let kind = self.kind_for(id, is_leaf);
        if let Some(n) = self.nodes.get_mut(&id) {
            n.kind = kind;
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn leaf_capacity(&self) -> usize {
        self.leaf_capacity
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.placement.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placement.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = MemberId> + '_ {
        self.placement.keys().copied()
    }

    pub fn placement(&self) -> &BTreeMap<MemberId, NodeId> {
        &self.placement
    }

    pub fn contains(&self, m: MemberId) -> bool {
        self.placement.contains_key(&m)
    }

    pub fn node(&self, id: NodeId) -> Option<&KeyNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &KeyNode> {
        self.nodes.values()
    }

    pub fn key(&self, id: NodeId) -> Option<&KeyTerm> {
        self.nodes.get(&id).and_then(|n| n.key.as_ref())
    }

    pub fn group_key(&self) -> Option<&KeyTerm> {
        self.key(NodeId::ROOT)
    }

    pub fn set_key(&mut self, id: NodeId, key: KeyTerm) -> Result<()> {
        let n = self.nodes.get_mut(&id).ok_or(Error::NodeNotFound(id))?;
        n.key = Some(key);
        n.key_version += 1;
        Ok(())
    }

    pub fn retire_key(&mut self, id: NodeId) -> Result<()> {
        let n = self.nodes.get_mut(&id).ok_or(Error::NodeNotFound(id))?;
        n.key = None;
        n.key_version += 1;
        Ok(())
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        !self.nodes.contains_key(&first_child(id, self.degree))
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied().filter(|id| self.is_leaf(*id))
    }

    pub fn occupants(&self, leaf: NodeId) -> BTreeSet<MemberId> {
        self.occupants.get(&leaf).cloned().unwrap_or_default()
    }

    pub fn leaf_of(&self, m: MemberId) -> Result<NodeId> {
        self.placement.get(&m).copied().ok_or(Error::MemberNotFound(m))
    }

    pub fn depth(&self, id: NodeId) -> u32 {
        depth_of(id, self.degree)
    }

    /// Maximum depth of an occupied leaf.
    pub fn height(&self) -> u32 {
        self.occupants.keys().map(|l| self.depth(*l)).max().unwrap_or(0)
    }

    /// Leaf-to-root node list starting at `leaf`.
    pub fn path_from(&self, leaf: NodeId) -> Vec<NodeId> {
        let mut path = vec![leaf];
        let mut n = leaf;
        while n.0 != 0 {
            n = NodeId((n.0 - 1) / self.degree as u64);
            path.push(n);
        }
        path
    }

    pub fn path_to_root(&self, m: MemberId) -> Result<Vec<NodeId>> {
        Ok(self.path_from(self.leaf_of(m)?))
    }

    pub fn subtree_members(&self, node: NodeId) -> Result<BTreeSet<MemberId>> {
        if !self.nodes.contains_key(&node) {
            return Err(Error::NodeNotFound(node));
        }
        Ok(self
            .occupants
            .iter()
            .filter(|(leaf, _)| is_ancestor_or_self(node, **leaf, self.degree))
            .flat_map(|(_, ms)| ms.iter().copied())
            .collect())
    }

    pub fn has_members_under(&self, node: NodeId) -> bool {
        self.occupants.keys().any(|leaf| is_ancestor_or_self(node, *leaf, self.degree))
    }

    /// Every leaf at one depth, every leaf filled to capacity.
    pub fn is_full(&self) -> bool {
        let h = self.height();
        let expected_leaves = (self.degree as u64).pow(h);
        let leaves: Vec<NodeId> = self.leaves().collect();
        leaves.len() as u64 == expected_leaves
            && leaves.iter().all(|l| {
                self.depth(*l) == h && self.occupants.get(l).map_or(0, |o| o.len()) == self.leaf_capacity
            })
    }

    /// Node keys the controller keeps (vacant leaves hold none).
    pub fn controller_key_count(&self) -> usize {
        self.nodes.values().filter(|n| n.key.is_some()).count()
    }

    pub fn occupied_leaf_count(&self) -> usize {
        self.occupants.len()
    }

    fn ensure_children(&mut self, m: NodeId) {
        for c in child_ids(m, self.degree) {
            let kind = self.kind_for(c, true);
            self.nodes.entry(c).or_insert(KeyNode { id: c, key: None, kind, key_version: 0 });
        }
        self.refresh_kind(m);
    }

    /// Turns leaf `m` into a KEK and moves its occupants, with the leaf key, to
    /// its first child. The KEK keeps the old leaf key until rekeyed.
    pub fn split_leaf(&mut self, m: NodeId) -> Result<NodeId> {
        if !self.nodes.contains_key(&m) {
            return Err(Error::NodeNotFound(m));
        }
        if !self.is_leaf(m) {
            return Err(Error::InternalInconsistency(format!("node {m} is not a leaf")));
        }
        self.ensure_children(m);
        let moved_to = first_child(m, self.degree);
        let key = self.key(m).cloned();
        if let Some(key) = key {
            self.set_key(moved_to, key)?;
        }
        if let Some(occ) = self.occupants.remove(&m) {
            for member in &occ {
                self.placement.insert(*member, moved_to);
            }
            self.occupants.insert(moved_to, occ);
        }
        self.version += 1;
        Ok(moved_to)
    }

    /// Puts `member` on `leaf` directly. The leaf must exist and have room.
    pub fn place_at(&mut self, member: MemberId, leaf: NodeId) -> Result<()> {
        if self.placement.contains_key(&member) {
            return Err(Error::AlreadyMember(member));
        }
        if !self.nodes.contains_key(&leaf) {
            return Err(Error::NodeNotFound(leaf));
        }
        if !self.is_leaf(leaf) || self.occupants.get(&leaf).map_or(0, |o| o.len()) >= self.leaf_capacity {
            return Err(Error::InternalInconsistency(format!("leaf {leaf} has no room")));
        }
        self.placement.insert(member, leaf);
        self.occupants.entry(leaf).or_default().insert(member);
        self.version += 1;
        Ok(())
    }

    /// Creates the children of leaf `m` without moving anyone; used to graft
    /// subtrees below vacant positions.
    pub fn expand_leaf(&mut self, m: NodeId) -> Result<()> {
        if self.occupants.contains_key(&m) {
            return Err(Error::InternalInconsistency(format!("leaf {m} is occupied")));
        }
        self.ensure_children(m);
        self.version += 1;
        Ok(())
    }

    /// Places a new member on the shallowest leaf with room (ties: smallest
    /// id). Without room the tree grows according to its [`Growth`] policy.
    pub fn insert_member(&mut self, member: MemberId) -> Result<Placement> {
        if self.placement.contains_key(&member) {
            return Err(Error::AlreadyMember(member));
        }
        let open = self
            .leaves()
            .filter(|l| self.occupants.get(l).map_or(0, |o| o.len()) < self.leaf_capacity)
            .min_by_key(|l| (self.depth(*l), *l));
        if let Some(leaf) = open {
            self.place_at(member, leaf)?;
            return Ok(Placement { leaf, split: None });
        }
        match self.growth {
            Growth::Split => {
                let target = self
                    .occupants
                    .keys()
                    .copied()
                    .min_by_key(|l| (self.depth(*l), *l))
                    .ok_or(Error::EmptyGroup)?;
                let moved_to = self.split_leaf(target)?;
                let leaf = NodeId(moved_to.0 + 1);
                self.place_at(member, leaf)?;
                Ok(Placement { leaf, split: Some((target, moved_to)) })
            }
            Growth::Widen => {
                if self.height() > 1 {
                    return Err(Error::InternalInconsistency("only height-one trees can widen".into()));
                }
                self.degree += 1;
                let leaf = NodeId(self.degree as u64);
                self.nodes.insert(leaf, KeyNode { id: leaf, key: None, kind: NodeKind::IndividualLeaf, key_version: 0 });
                self.place_at(member, leaf)?;
                Ok(Placement { leaf, split: None })
            }
        }
    }

    /// Removes `member`. Returns the nodes whose keys it knew and that others
    /// still share: its path without the leaf when the leaf is vacated, the
    /// whole path when other cluster members remain on it.
    pub fn remove_member(&mut self, member: MemberId) -> Result<Vec<NodeId>> {
        let leaf = self.placement.remove(&member).ok_or(Error::MemberNotFound(member))?;
        let occ = self.occupants.get_mut(&leaf).expect("placement and occupants agree");
        occ.remove(&member);
        let vacated = occ.is_empty();
        if vacated {
            self.occupants.remove(&leaf);
            self.retire_key(leaf)?;
        }
        self.version += 1;
        let path = self.path_from(leaf);
        Ok(if vacated { path[1..].to_vec() } else { path })
    }
}
