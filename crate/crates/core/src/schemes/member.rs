use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Chain, Content, RekeyPlan};
use crate::keytree::{is_ancestor_or_self, parent_id, relabel, MemberId, NodeId};
use crate::symcrypto::{xor_terms, KeyTerm};

/// What one member holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberState {
    pub member: MemberId,
    pub leaf: NodeId,
    /// Keys of the nodes on the member's path, by node id.
    pub known: BTreeMap<NodeId, KeyTerm>,
    /// Key held outside the tree: the GKMP key-encrypting key or the hybrid
    /// personal key.
    pub aux: Option<KeyTerm>,
}

impl MemberState {
    pub fn held(&self) -> BTreeSet<KeyTerm> {
        self.known.values().chain(self.aux.iter()).cloned().collect()
    }

    pub fn key_count(&self) -> usize {
        self.known.len() + usize::from(self.aux.is_some())
    }

    pub fn group_key(&self) -> Option<&KeyTerm> {
        self.known.get(&NodeId::ROOT)
    }
}

/// Replays `plan` from the member's side and returns its new state.
///
/// Undecryptable messages are skipped. Departed members come back unchanged.
pub fn apply_plan_member(ms: &MemberState, plan: &RekeyPlan) -> MemberState {
    apply_logged(ms, plan).0
}

/// Same as [`apply_plan_member`], also returning the indices of the messages
/// the member could decrypt.
pub(crate) fn apply_logged(ms: &MemberState, plan: &RekeyPlan) -> (MemberState, Vec<usize>) {
    if plan.departed.contains(&ms.member) {
        return (ms.clone(), Vec::new());
    }
    let k = plan.degree;
    let old = &ms.known;

    let (leaf, kept) = if let Some(&leaf) = plan.joined.get(&ms.member) {
        (leaf, old.clone())
    } else if let Some((&from, &to)) = plan.renames.iter().find(|(from, _)| is_ancestor_or_self(**from, ms.leaf, k)) {
        // keys above the moved subtree keep their ids
        let mut kept: BTreeMap<NodeId, KeyTerm> =
            old.iter().filter(|(n, _)| !is_ancestor_or_self(from, **n, k)).map(|(n, key)| (*n, key.clone())).collect();
        for (n, key) in old.iter().filter(|(n, _)| is_ancestor_or_self(from, **n, k)) {
            kept.insert(relabel(*n, from, to, k), key.clone());
        }
        (relabel(ms.leaf, from, to, k), kept)
    } else {
        (ms.leaf, old.clone())
    };

    let mut path = vec![leaf];
    let mut n = leaf;
    while let Ok(p) = parent_id(n, k) {
        path.push(p);
        n = p;
    }
    let on_path: BTreeSet<NodeId> = path.iter().copied().collect();
    let dirtied: BTreeSet<NodeId> = plan.dirtied.iter().copied().collect();

    let mut held = ms.held();
    let mut aux = ms.aux.clone();
    let mut received: BTreeMap<NodeId, KeyTerm> = BTreeMap::new();
    let mut done = vec![false; plan.messages.len()];
    let mut log = Vec::new();

    let install = |node: NodeId, key: KeyTerm, received: &mut BTreeMap<NodeId, KeyTerm>, held: &mut BTreeSet<KeyTerm>| {
        held.insert(key.clone());
        received.insert(node, key.clone());
        let Some(chain) = plan.chain else { return };
        let (mut cur, mut cur_key) = (node, key);
        while let Ok(p) = parent_id(cur, k) {
            if !dirtied.contains(&p) || received.contains_key(&p) {
                break;
            }
            cur_key = chain.step(&cur_key);
            held.insert(cur_key.clone());
            received.insert(p, cur_key.clone());
            cur = p;
        }
    };

    loop {
        let mut progress = false;
        for (i, msg) in plan.messages.iter().enumerate() {
            if done[i] {
                continue;
            }
            let Ok(payload) = msg.ciphertext.decrypt(&held) else { continue };
            let payload = payload.to_vec();
            done[i] = true;
            progress = true;
            log.push(i);
            match msg.content {
                Content::NodeKey => {
                    let target = msg.ciphertext.target_node;
                    if on_path.contains(&target) {
                        install(target, payload[0].clone(), &mut received, &mut held);
                    }
                }
                Content::Factor => {
                    let d = &payload[0];
                    held.insert(d.clone());
                    for node in &path {
                        if plan.xor_nodes.contains(node) && !received.contains_key(node) {
                            if let Some(prev) = old.get(node) {
                                let next = xor_terms(prev, d);
                                held.insert(next.clone());
                                received.insert(*node, next);
                            }
                        }
                    }
                }
                Content::KeyPacket => {
                    install(NodeId::ROOT, payload[0].clone(), &mut received, &mut held);
                    if let Some(gkek) = payload.get(1) {
                        held.insert(gkek.clone());
                        aux = Some(gkek.clone());
                    }
                }
            }
        }
        if !progress {
            break;
        }
    }

    let known = path
        .iter()
        .filter_map(|n| received.get(n).or_else(|| kept.get(n)).map(|key| (*n, key.clone())))
        .collect();
    (MemberState { member: ms.member, leaf, known, aux }, log)
}

impl Chain {
    pub fn step(self, t: &KeyTerm) -> KeyTerm {
        match self {
            Chain::Right => KeyTerm::g_right(t.clone()),
            Chain::Hash => KeyTerm::hash_iter(t.clone(), 1),
        }
    }
}
