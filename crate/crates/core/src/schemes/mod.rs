//! Rekeying for each scheme behind one interface.
//!
//! A plan function mutates the controller's [`GroupState`] and returns the
//! ordered [`RekeyPlan`] that brings every member along. Members replay plans
//! with [`apply_plan_member`]; recipient sets are computed by that same replay,
//! so they always follow from the encryption keys.

mod member;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keytree::{child_ids, KeyTree, MemberId, NodeId};
use crate::symcrypto::{encrypt, xor_terms, Ciphertext, KeySource, KeyTerm};

pub use member::{apply_plan_member, MemberState};
pub(crate) use member::apply_logged;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeId {
    Simple,
    Gkmp,
    Lkh,
    Ofc,
    Ihc,
    SdLkh,
    Hybrid,
}

impl SchemeId {
    pub const ALL: [SchemeId; 7] =
        [SchemeId::Simple, SchemeId::Gkmp, SchemeId::Lkh, SchemeId::Ofc, SchemeId::Ihc, SchemeId::SdLkh, SchemeId::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::Simple => "simple",
            SchemeId::Gkmp => "gkmp",
            SchemeId::Lkh => "lkh",
            SchemeId::Ofc => "ofc",
            SchemeId::Ihc => "ihc",
            SchemeId::SdLkh => "sdlkh",
            SchemeId::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name() == norm)
            .ok_or_else(|| Error::InvalidParams(format!("unknown scheme `{s}`")))
    }
}

/// A scheme with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Simple,
    Gkmp,
    Lkh { degree: usize },
    /// Binary only.
    Ofc,
    Ihc { degree: usize },
    SdLkh { degree: usize },
    Hybrid { arity: usize, cluster_size: usize },
}

impl Scheme {
    /// Builds and validates a scheme. `degree` is the tree degree (the hybrid
    /// arity); it is ignored by the flat schemes.
    pub fn new(id: SchemeId, degree: usize, cluster_size: Option<usize>) -> Result<Self> {
        let scheme = match id {
            SchemeId::Simple => Scheme::Simple,
            SchemeId::Gkmp => Scheme::Gkmp,
            SchemeId::Lkh => Scheme::Lkh { degree },
            SchemeId::Ofc => {
                if degree != 2 {
                    return Err(Error::InvalidParams(format!("OFC needs a binary tree, got degree {degree}")));
                }
                Scheme::Ofc
            }
            SchemeId::Ihc => Scheme::Ihc { degree },
            SchemeId::SdLkh => Scheme::SdLkh { degree },
            SchemeId::Hybrid => Scheme::Hybrid {
                arity: degree,
                cluster_size: cluster_size
                    .ok_or_else(|| Error::InvalidParams("hybrid scheme needs a cluster size".into()))?,
            },
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Scheme::Lkh { degree } | Scheme::Ihc { degree } | Scheme::SdLkh { degree } if degree < 2 => {
                Err(Error::InvalidParams(format!("tree degree must be at least 2, got {degree}")))
            }
            Scheme::Hybrid { arity, .. } if arity < 2 => {
                Err(Error::InvalidParams(format!("hybrid arity must be at least 2, got {arity}")))
            }
            Scheme::Hybrid { cluster_size: 0, .. } => Err(Error::InvalidParams("cluster size must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn id(&self) -> SchemeId {
        match self {
            Scheme::Simple => SchemeId::Simple,
            Scheme::Gkmp => SchemeId::Gkmp,
            Scheme::Lkh { .. } => SchemeId::Lkh,
            Scheme::Ofc => SchemeId::Ofc,
            Scheme::Ihc { .. } => SchemeId::Ihc,
            Scheme::SdLkh { .. } => SchemeId::SdLkh,
            Scheme::Hybrid { .. } => SchemeId::Hybrid,
        }
    }

    /// Tree degree, `None` for the flat schemes whose star widens with the group.
    pub fn degree(&self) -> Option<usize> {
        match *self {
            Scheme::Simple | Scheme::Gkmp => None,
            Scheme::Ofc => Some(2),
            Scheme::Lkh { degree } | Scheme::Ihc { degree } | Scheme::SdLkh { degree } => Some(degree),
            Scheme::Hybrid { arity, .. } => Some(arity),
        }
    }

    pub fn cluster_size(&self) -> Option<usize> {
        match *self {
            Scheme::Hybrid { cluster_size, .. } => Some(cluster_size),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Scheme::Simple | Scheme::Gkmp | Scheme::Ofc => write!(f, "{}", self.id()),
            Scheme::Lkh { degree } | Scheme::Ihc { degree } | Scheme::SdLkh { degree } => {
                write!(f, "{}(k={degree})", self.id())
            }
            Scheme::Hybrid { arity, cluster_size } => write!(f, "hybrid(a={arity},M={cluster_size})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delivery {
    Unicast,
    Multicast,
}

/// How a member interprets a decrypted payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Content {
    /// The new key of `ciphertext.target_node`.
    NodeKey,
    /// An updating factor: XOR it into every dirtied key on the path.
    Factor,
    /// GKMP packet: new group key and new key-encrypting key.
    KeyPacket,
}

/// How members extend a received key up their path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chain {
    /// `R(x)`, the right half of `G(x)`.
    Right,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RekeyMessage {
    pub ciphertext: Ciphertext,
    pub content: Content,
    pub kind: Delivery,
    /// Node whose key encrypts the message; `None` for keys held outside the
    /// tree (personal keys, the GKMP key-encrypting key).
    pub enc_node: Option<NodeId>,
    pub recipients: BTreeSet<MemberId>,
    /// Batch rekeying: where the receiving subtree ends up.
    pub new_position: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RekeyPlan {
    pub messages: Vec<RekeyMessage>,
    pub new_group_key: Option<KeyTerm>,
    /// Nodes that received a new key, in the numbering after the event.
    pub dirtied: Vec<NodeId>,
    /// Tree degree after the event.
    pub degree: usize,
    pub chain: Option<Chain>,
    /// Nodes whose new key is the old one XOR a delivered factor.
    pub xor_nodes: BTreeSet<NodeId>,
    /// Subtrees that moved: old root id to new root id.
    pub renames: BTreeMap<NodeId, NodeId>,
    pub joined: BTreeMap<MemberId, NodeId>,
    pub departed: BTreeSet<MemberId>,
}

impl RekeyPlan {
    pub fn unicast_count(&self) -> usize {
        self.messages.iter().filter(|m| m.kind == Delivery::Unicast).count()
    }

    pub fn multicast_count(&self) -> usize {
        self.messages.iter().filter(|m| m.kind == Delivery::Multicast).count()
    }

    pub fn payload_keys(&self) -> usize {
        self.messages.iter().map(|m| m.ciphertext.payload.len()).sum()
    }

    pub fn enc_keys(&self) -> impl Iterator<Item = &KeyTerm> {
        self.messages.iter().map(|m| &m.ciphertext.enc_key)
    }
}

/// Controller state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupState {
    scheme: Scheme,
    tree: KeyTree,
    keys: KeySource,
    gkek: Option<KeyTerm>,
    personal: BTreeMap<MemberId, KeyTerm>,
    seq: u64,
    events: u64,
}

pub fn init_group(scheme: Scheme, members: &[MemberId]) -> Result<(GroupState, BTreeMap<MemberId, MemberState>)> {
    GroupState::init(scheme, members, KeySource::new())
}

impl GroupState {
    pub fn init(
        scheme: Scheme,
        members: &[MemberId],
        mut keys: KeySource,
    ) -> Result<(GroupState, BTreeMap<MemberId, MemberState>)> {
        scheme.validate()?;
        let tree = match scheme {
            Scheme::Simple | Scheme::Gkmp => KeyTree::build_star(members, &mut keys)?,
            Scheme::Ofc => KeyTree::build_balanced(members, 2, &mut keys)?,
            Scheme::Lkh { degree } | Scheme::Ihc { degree } | Scheme::SdLkh { degree } => {
                KeyTree::build_balanced(members, degree, &mut keys)?
            }
            Scheme::Hybrid { arity, cluster_size } => KeyTree::build_clustered(members, arity, cluster_size, &mut keys)?,
        };
        let gkek = (scheme == Scheme::Gkmp).then(|| keys.fresh_key("gkek"));
        let personal = match scheme {
            Scheme::Hybrid { .. } => members.iter().map(|m| (*m, keys.fresh_key("personal"))).collect(),
            _ => BTreeMap::new(),
        };
        let state = GroupState { scheme, tree, keys, gkek, personal, seq: 0, events: 0 };
        let views = state.tree.members().map(|m| state.member_view(m).map(|v| (m, v))).collect::<Result<_>>()?;
        Ok((state, views))
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn tree(&self) -> &KeyTree {
        &self.tree
    }

    pub fn group_key(&self) -> Option<&KeyTerm> {
        self.tree.group_key()
    }

    pub fn gkek(&self) -> Option<&KeyTerm> {
        self.gkek.as_ref()
    }

    pub fn personal_key(&self, m: MemberId) -> Option<&KeyTerm> {
        self.personal.get(&m)
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn members(&self) -> impl Iterator<Item = MemberId> + '_ {
        self.tree.members()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Keys the controller stores: tree keys, the GKMP key-encrypting key and,
    /// for the hybrid scheme, one seed per occupied cluster from which the
    /// personal keys derive.
    pub fn controller_storage(&self) -> usize {
        let seeds = match self.scheme {
            Scheme::Hybrid { .. } => self.tree.occupied_leaf_count(),
            _ => 0,
        };
        self.tree.controller_key_count() + usize::from(self.gkek.is_some()) + seeds
    }

    /// The keys member `m` is entitled to hold right now.
    pub fn member_view(&self, m: MemberId) -> Result<MemberState> {
        let leaf = self.tree.leaf_of(m)?;
        let known = self
            .tree
            .path_from(leaf)
            .into_iter()
            .filter_map(|n| self.tree.key(n).map(|key| (n, key.clone())))
            .collect();
        let aux = match self.scheme {
            Scheme::Gkmp => self.gkek.clone(),
            Scheme::Hybrid { .. } => self.personal.get(&m).cloned(),
            _ => None,
        };
        Ok(MemberState { member: m, leaf, known, aux })
    }

    /// What a newcomer holds before reading its join messages: its individual
    /// key, or the personal key in the hybrid scheme.
    pub fn joiner_view(&self, m: MemberId) -> Result<MemberState> {
        let leaf = self.tree.leaf_of(m)?;
        Ok(match self.scheme {
            Scheme::Hybrid { .. } => MemberState {
                member: m,
                leaf,
                known: BTreeMap::new(),
                aux: Some(self.personal.get(&m).cloned().ok_or(Error::MemberNotFound(m))?),
            },
            _ => {
                let key = self.tree.key(leaf).cloned().ok_or(Error::NodeNotFound(leaf))?;
                MemberState { member: m, leaf, known: BTreeMap::from([(leaf, key)]), aux: None }
            }
        })
    }

    /// Members currently holding `msg`'s encryption key.
    pub fn recipients_of(&self, msg: &RekeyMessage) -> Result<BTreeSet<MemberId>> {
        let enc = &msg.ciphertext.enc_key;
        if let Some(node) = self.tree.nodes().find(|n| n.key.as_ref() == Some(enc)) {
            return self.tree.subtree_members(node.id);
        }
        if self.gkek.as_ref() == Some(enc) {
            return Ok(self.tree.members().collect());
        }
        if let Some((m, _)) = self.personal.iter().find(|(_, key)| *key == enc) {
            return Ok(BTreeSet::from([*m]));
        }
        Err(Error::InternalInconsistency(format!("no holder of encryption key {enc}")))
    }

    pub fn plan_leave(&mut self, m: MemberId) -> Result<RekeyPlan> {
        if !self.tree.contains(m) {
            return Err(Error::MemberNotFound(m));
        }
        let pre = self.views();
        let (messages, chain) = match self.scheme {
            Scheme::Simple => (self.simple_leave(m)?, None),
            Scheme::Gkmp => (self.gkmp_leave(m)?, None),
            Scheme::Lkh { .. } => (self.lkh_leave(m)?, None),
            Scheme::Ofc => (self.chain_leave(m, Chain::Right)?, Some(Chain::Right)),
            Scheme::Ihc { .. } => (self.chain_leave(m, Chain::Hash)?, Some(Chain::Hash)),
            Scheme::SdLkh { .. } => (self.sdlkh_leave(m)?, None),
            Scheme::Hybrid { .. } => (self.hybrid_leave(m)?, Some(Chain::Hash)),
        };
        let (messages, dirtied) = messages;
        let mut plan = self.new_plan(messages, dirtied, chain, BTreeMap::new(), BTreeMap::new(), BTreeSet::from([m]));
        self.mark_xor(&mut plan);
        self.finish(plan, &pre)
    }

    pub fn plan_join(&mut self, m: MemberId) -> Result<RekeyPlan> {
        if self.tree.contains(m) {
            return Err(Error::AlreadyMember(m));
        }
        let pre = self.views();
        let placement = self.tree.insert_member(m)?;
        let mut renames = BTreeMap::new();
        if let Some((from, to)) = placement.split {
            renames.insert(from, to);
        }
        let leaf = placement.leaf;
        let (messages, chain) = match self.scheme {
            Scheme::Simple => (self.simple_join(leaf)?, None),
            Scheme::Gkmp => (self.gkmp_join(leaf)?, None),
            Scheme::Lkh { .. } => (self.lkh_join(m, leaf)?, None),
            Scheme::Ofc => (self.chain_join(m, leaf, Chain::Right)?, Some(Chain::Right)),
            Scheme::Ihc { .. } => (self.chain_join(m, leaf, Chain::Hash)?, Some(Chain::Hash)),
            Scheme::SdLkh { .. } => (self.sdlkh_join(m, leaf)?, None),
            Scheme::Hybrid { .. } => (self.hybrid_join(m, leaf)?, Some(Chain::Hash)),
        };
        let (messages, dirtied) = messages;
        let joined = BTreeMap::from([(m, leaf)]);
        let mut plan = self.new_plan(messages, dirtied, chain, renames, joined, BTreeSet::new());
        self.mark_xor(&mut plan);
        self.finish(plan, &pre)
    }

    fn mark_xor(&self, plan: &mut RekeyPlan) {
        if matches!(self.scheme, Scheme::SdLkh { .. }) {
            plan.xor_nodes = plan.dirtied.iter().copied().collect();
        }
    }

    // ---- shared machinery, also used by batch rekeying ----

    pub(crate) fn tree_mut(&mut self) -> &mut KeyTree {
        &mut self.tree
    }

    pub(crate) fn replace_tree(&mut self, tree: KeyTree) {
        self.tree = tree;
    }

    pub(crate) fn fresh(&mut self, tag: &str) -> KeyTerm {
        self.keys.fresh_key(tag)
    }

    pub(crate) fn views(&self) -> BTreeMap<MemberId, MemberState> {
        self.tree.members().filter_map(|m| self.member_view(m).ok().map(|v| (m, v))).collect()
    }

    pub(crate) fn message(
        &mut self,
        payload: Vec<KeyTerm>,
        enc_key: &KeyTerm,
        target: NodeId,
        content: Content,
        enc_node: Option<NodeId>,
    ) -> RekeyMessage {
        let ciphertext = encrypt(payload, enc_key, target, self.seq);
        self.seq += 1;
        RekeyMessage {
            ciphertext,
            content,
            kind: Delivery::Multicast,
            enc_node,
            recipients: BTreeSet::new(),
            new_position: None,
        }
    }

    /// Message carrying `payload` under the current key of `node`.
    pub(crate) fn under_node(&mut self, payload: KeyTerm, node: NodeId, target: NodeId, content: Content) -> Result<RekeyMessage> {
        let key = self.tree.key(node).cloned().ok_or(Error::NodeNotFound(node))?;
        Ok(self.message(vec![payload], &key, target, content, Some(node)))
    }

    /// Fresh key for an interior node.
    pub(crate) fn fresh_node_key(&mut self, node: NodeId) -> KeyTerm {
        self.fresh(if node == NodeId::ROOT { "tek" } else { "kek" })
    }

    /// LKH-style delivery: each dirtied node's new key goes out under the key
    /// of every child that has members below it.
    pub(crate) fn cover(&mut self, dirtied: &[NodeId]) -> Result<Vec<RekeyMessage>> {
        let k = self.tree.degree();
        let mut out = Vec::new();
        for &d in dirtied {
            let new = self.tree.key(d).cloned().ok_or(Error::NodeNotFound(d))?;
            for c in child_ids(d, k) {
                if self.tree.node(c).is_some() && self.tree.has_members_under(c) {
                    out.push(self.under_node(new.clone(), c, d, Content::NodeKey)?);
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn bottom_up(&self, mut nodes: Vec<NodeId>) -> Vec<NodeId> {
        nodes.sort_by_key(|n| (Reverse(self.tree.depth(*n)), *n));
        nodes.dedup();
        nodes
    }

    pub(crate) fn new_plan(
        &self,
        messages: Vec<RekeyMessage>,
        dirtied: Vec<NodeId>,
        chain: Option<Chain>,
        renames: BTreeMap<NodeId, NodeId>,
        joined: BTreeMap<MemberId, NodeId>,
        departed: BTreeSet<MemberId>,
    ) -> RekeyPlan {
        RekeyPlan {
            messages,
            new_group_key: None,
            dirtied,
            degree: self.tree.degree(),
            chain,
            xor_nodes: BTreeSet::new(),
            renames,
            joined,
            departed,
        }
    }

    /// Fills in recipients and delivery kinds by replaying the plan for every
    /// member after the event, and bumps the event counter.
    pub(crate) fn finish(&mut self, mut plan: RekeyPlan, pre: &BTreeMap<MemberId, MemberState>) -> Result<RekeyPlan> {
        plan.degree = self.tree.degree();
        plan.new_group_key = self.tree.group_key().cloned();
        let capacity = self.tree.leaf_capacity();
        let mut individual: BTreeSet<KeyTerm> = BTreeSet::new();
        let mut note_individual = |v: &MemberState| {
            if matches!(self.scheme, Scheme::Hybrid { .. }) {
                individual.extend(v.aux.iter().cloned());
            } else if capacity == 1 {
                individual.extend(v.known.get(&v.leaf).cloned());
            }
        };
        pre.values().for_each(&mut note_individual);
        let members: Vec<MemberId> = self.tree.members().collect();
        for m in members {
            let start = match pre.get(&m) {
                Some(v) if !plan.joined.contains_key(&m) => v.clone(),
                _ => self.joiner_view(m)?,
            };
            note_individual(&start);
            let (_, log) = apply_logged(&start, &plan);
            for i in log {
                plan.messages[i].recipients.insert(m);
            }
        }
        for msg in &mut plan.messages {
            msg.kind = if individual.contains(&msg.ciphertext.enc_key) {
                Delivery::Unicast
            } else {
                Delivery::Multicast
            };
        }
        self.events += 1;
        Ok(plan)
    }

    // ---- per-scheme rules ----

    fn simple_leave(&mut self, m: MemberId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        self.tree.remove_member(m)?;
        self.simple_rekey()
    }

    fn simple_join(&mut self, leaf: NodeId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let ind = self.fresh("ind");
        self.tree.set_key(leaf, ind)?;
        self.simple_rekey()
    }

    /// New group key to every member under its individual key.
    fn simple_rekey(&mut self) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let tek = self.fresh("tek");
        self.tree.set_key(NodeId::ROOT, tek.clone())?;
        let leaves: BTreeSet<NodeId> = self.tree.placement().values().copied().collect();
        let mut out = Vec::new();
        for leaf in leaves {
            out.push(self.under_node(tek.clone(), leaf, NodeId::ROOT, Content::NodeKey)?);
        }
        Ok((out, vec![NodeId::ROOT]))
    }

    fn gkmp_packet(&mut self) -> Result<(Vec<KeyTerm>, KeyTerm)> {
        let old = self.gkek.clone().ok_or_else(|| Error::InternalInconsistency("GKMP state without GKEK".into()))?;
        let tek = self.fresh("tek");
        let gkek = self.fresh("gkek");
        self.tree.set_key(NodeId::ROOT, tek.clone())?;
        self.gkek = Some(gkek.clone());
        Ok((vec![tek, gkek], old))
    }

    /// The new packet travels under the old key-encrypting key, which the
    /// departing member also holds.
    fn gkmp_leave(&mut self, m: MemberId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        self.tree.remove_member(m)?;
        let (packet, old) = self.gkmp_packet()?;
        let msg = self.message(packet, &old, NodeId::ROOT, Content::KeyPacket, None);
        Ok((vec![msg], vec![NodeId::ROOT]))
    }

    fn gkmp_join(&mut self, leaf: NodeId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let ind = self.fresh("ind");
        self.tree.set_key(leaf, ind.clone())?;
        let (packet, old) = self.gkmp_packet()?;
        let mut out = Vec::new();
        if self.tree.len() > 1 {
            out.push(self.message(packet.clone(), &old, NodeId::ROOT, Content::KeyPacket, None));
        }
        out.push(self.message(packet, &ind, NodeId::ROOT, Content::KeyPacket, Some(leaf)));
        Ok((out, vec![NodeId::ROOT]))
    }

    fn lkh_leave(&mut self, m: MemberId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let dirtied = self.tree.remove_member(m)?;
        let dirtied = self.bottom_up(dirtied);
        for &d in &dirtied {
            let key = self.fresh_node_key(d);
            self.tree.set_key(d, key)?;
        }
        Ok((self.cover(&dirtied)?, dirtied))
    }

    /// Other members below `node` besides `m`.
    fn others_under(&self, node: NodeId, m: MemberId) -> Result<bool> {
        Ok(self.tree.subtree_members(node)?.iter().any(|x| *x != m))
    }

    fn lkh_join(&mut self, m: MemberId, leaf: NodeId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let ind = self.fresh("ind");
        self.tree.set_key(leaf, ind.clone())?;
        let dirtied = self.bottom_up(self.tree.path_from(leaf)[1..].to_vec());
        let mut out = Vec::new();
        for &d in &dirtied {
            let old = self.tree.key(d).cloned();
            let new = self.fresh_node_key(d);
            self.tree.set_key(d, new.clone())?;
            out.push(self.message(vec![new.clone()], &ind, d, Content::NodeKey, Some(leaf)));
            if let Some(old) = old {
                if self.others_under(d, m)? {
                    out.push(self.message(vec![new], &old, d, Content::NodeKey, Some(d)));
                }
            }
        }
        Ok((out, dirtied))
    }

    /// OFC and IHC leave: one random value `r` at the lowest dirtied node,
    /// each ancestor gets the chain step of its child's key.
    fn chain_leave(&mut self, m: MemberId, chain: Chain) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let removed = self.tree.remove_member(m)?;
        let dirtied = self.bottom_up(removed);
        let k = self.tree.degree();
        let dirty: BTreeSet<NodeId> = dirtied.iter().copied().collect();
        let mut cur = self.fresh("r");
        let mut out = Vec::new();
        for &d in &dirtied {
            self.tree.set_key(d, cur.clone())?;
            for c in child_ids(d, k) {
                if !dirty.contains(&c) && self.tree.node(c).is_some() && self.tree.has_members_under(c) {
                    out.push(self.under_node(cur.clone(), c, d, Content::NodeKey)?);
                }
            }
            cur = chain.step(&cur);
        }
        Ok((out, dirtied))
    }

    fn chain_join(&mut self, m: MemberId, leaf: NodeId, chain: Chain) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let ind = self.fresh("ind");
        self.tree.set_key(leaf, ind.clone())?;
        let dirtied = self.bottom_up(self.tree.path_from(leaf)[1..].to_vec());
        self.chain_join_from(m, leaf, &ind, dirtied, chain)
    }

    /// Sends `r` to the newcomer, then each dirtied key to the existing holders
    /// under the key it replaces.
    fn chain_join_from(
        &mut self,
        m: MemberId,
        enc_node: NodeId,
        first_key: &KeyTerm,
        dirtied: Vec<NodeId>,
        chain: Chain,
    ) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let mut out = Vec::new();
        let Some(&lowest) = dirtied.first() else { return Ok((out, dirtied)) };
        let r = self.fresh("r");
        let node = (!self.personal.contains_key(&m)).then_some(enc_node);
        out.push(self.message(vec![r.clone()], first_key, lowest, Content::NodeKey, node));
        let mut cur = r;
        for &d in &dirtied {
            let old = self.tree.key(d).cloned();
            self.tree.set_key(d, cur.clone())?;
            if let Some(old) = old {
                if self.others_under(d, m)? {
                    out.push(self.message(vec![cur.clone()], &old, d, Content::NodeKey, Some(d)));
                }
            }
            cur = chain.step(&cur);
        }
        Ok((out, dirtied))
    }

    fn sdlkh_leave(&mut self, m: MemberId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let removed = self.tree.remove_member(m)?;
        let dirtied = self.bottom_up(removed);
        let k = self.tree.degree();
        let dirty: BTreeSet<NodeId> = dirtied.iter().copied().collect();
        let factor = self.fresh("D");
        let mut out = Vec::new();
        for &d in &dirtied {
            for c in child_ids(d, k) {
                if !dirty.contains(&c) && self.tree.node(c).is_some() && self.tree.has_members_under(c) {
                    out.push(self.under_node(factor.clone(), c, d, Content::Factor)?);
                }
            }
        }
        for &d in &dirtied {
            let old = self.tree.key(d).cloned().ok_or(Error::NodeNotFound(d))?;
            self.tree.set_key(d, xor_terms(&old, &factor))?;
        }
        Ok((out, dirtied))
    }

    fn sdlkh_join(&mut self, m: MemberId, leaf: NodeId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let ind = self.fresh("ind");
        self.tree.set_key(leaf, ind.clone())?;
        let dirtied = self.bottom_up(self.tree.path_from(leaf)[1..].to_vec());
        let old_root = self.tree.key(NodeId::ROOT).cloned();
        let factor = self.fresh("D");
        let mut out = Vec::new();
        for &d in &dirtied {
            let new = match self.tree.key(d) {
                Some(old) => xor_terms(old, &factor),
                None => self.fresh_node_key(d),
            };
            self.tree.set_key(d, new.clone())?;
            out.push(self.message(vec![new], &ind, d, Content::NodeKey, Some(leaf)));
        }
        if let Some(old_root) = old_root {
            if self.others_under(NodeId::ROOT, m)? && !dirtied.is_empty() {
                out.push(self.message(vec![factor], &old_root, NodeId::ROOT, Content::Factor, Some(NodeId::ROOT)));
            }
        }
        Ok((out, dirtied))
    }

    /// Hash chain starting at the member's cluster key: the `M-1` survivors
    /// get `r` under their personal keys, the rest of the path follows IHC.
    fn hybrid_leave(&mut self, m: MemberId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let leaf = self.tree.leaf_of(m)?;
        self.personal.remove(&m);
        let removed = self.tree.remove_member(m)?;
        let dirtied = self.bottom_up(removed);
        let k = self.tree.degree();
        let dirty: BTreeSet<NodeId> = dirtied.iter().copied().collect();
        let mut cur = self.fresh("r");
        let mut out = Vec::new();
        for &d in &dirtied {
            self.tree.set_key(d, cur.clone())?;
            if d == leaf {
                for s in self.tree.occupants(leaf) {
                    let pk = self.personal.get(&s).cloned().ok_or(Error::MemberNotFound(s))?;
                    out.push(self.message(vec![cur.clone()], &pk, d, Content::NodeKey, None));
                }
            } else {
                for c in child_ids(d, k) {
                    if !dirty.contains(&c) && self.tree.node(c).is_some() && self.tree.has_members_under(c) {
                        out.push(self.under_node(cur.clone(), c, d, Content::NodeKey)?);
                    }
                }
            }
            cur = Chain::Hash.step(&cur);
        }
        Ok((out, dirtied))
    }

    fn hybrid_join(&mut self, m: MemberId, leaf: NodeId) -> Result<(Vec<RekeyMessage>, Vec<NodeId>)> {
        let pk = self.fresh("personal");
        self.personal.insert(m, pk.clone());
        let dirtied = self.bottom_up(self.tree.path_from(leaf));
        self.chain_join_from(m, leaf, &pk, dirtied, Chain::Hash)
    }
}
