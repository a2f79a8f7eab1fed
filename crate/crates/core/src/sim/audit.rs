//! Forward and backward secrecy verdicts over a finished trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::closure::ClosureIndex;
use super::scenario::Trace;
use crate::keytree::MemberId;
use crate::symcrypto::KeyTerm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    Forward,
    Backward,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Property::Forward => "forward",
            Property::Backward => "backward",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub event: usize,
    pub member: MemberId,
    pub property: Property,
    pub pass: bool,
    /// Group keys the persona must not learn.
    pub checked: usize,
    /// First protected group key found in the persona's closure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<KeyTerm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derivation: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub verdicts: Vec<Verdict>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.pass)
    }

    pub fn of(&self, property: Property) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(move |v| v.property == property)
    }
}

/// Checks every leave for forward secrecy and every join for backward
/// secrecy.
///
/// A leaver starts from the keys it held when it left and sees every
/// ciphertext of the run; it must not reach any group key from that event up
/// to (not including) its next join. A joiner starts from the keys it holds
/// after joining and sees every ciphertext up to and including its join; it
/// must not reach any group key in force since it was last a member.
pub fn audit_secrecy(trace: &Trace) -> AuditReport {
    let cts: Vec<_> = trace.ciphertexts().cloned().collect();
    // group_keys[i] is the key in force before event i; the last entry is the final key
    let mut group_keys = vec![trace.initial_group_key.clone()];
    group_keys.extend(trace.events.iter().map(|e| e.group_key.clone()));
    let persona_keys = trace.events.iter().flat_map(|e| e.departed.iter().chain(&e.joined)).flat_map(|p| &p.keys);
    let index = ClosureIndex::new(&cts, group_keys.iter().chain(persona_keys));

    let mut ends = Vec::with_capacity(trace.events.len());
    let mut count = 0;
    for e in &trace.events {
        count += e.messages.len();
        ends.push(count);
    }
    let mut joins_of: BTreeMap<MemberId, Vec<usize>> = BTreeMap::new();
    let mut leaves_of: BTreeMap<MemberId, Vec<usize>> = BTreeMap::new();
    for e in &trace.events {
        for m in &e.joins {
            joins_of.entry(*m).or_default().push(e.index);
        }
        for m in &e.leaves {
            leaves_of.entry(*m).or_default().push(e.index);
        }
    }

    let mut verdicts = Vec::new();
    for e in &trace.events {
        for p in &e.departed {
            let until = joins_of.get(&p.member).and_then(|j| j.iter().find(|i| **i > e.index)).copied();
            let until = until.unwrap_or(trace.events.len());
            // keys after events e..until-1
            let targets = &group_keys[e.index + 1..=until];
            let known: BTreeSet<KeyTerm> = p.keys.iter().cloned().collect();
            let closure = index.run(&known, cts.len());
            verdicts.push(verdict(e.index, p.member, Property::Forward, targets, &closure));
        }
        for p in &e.joined {
            let from = leaves_of.get(&p.member).and_then(|l| l.iter().rev().find(|i| **i < e.index)).map_or(0, |i| i + 1);
            // keys in force before this event since the member last left
            let targets = &group_keys[from..=e.index];
            let known: BTreeSet<KeyTerm> = p.keys.iter().cloned().collect();
            let closure = index.run(&known, ends[e.index]);
            verdicts.push(verdict(e.index, p.member, Property::Backward, targets, &closure));
        }
    }
    AuditReport { verdicts }
}

fn verdict(
    event: usize,
    member: MemberId,
    property: Property,
    targets: &[KeyTerm],
    closure: &super::closure::Closure<'_>,
) -> Verdict {
    let witness = targets.iter().find(|t| closure.contains(t)).cloned();
    let derivation = witness.as_ref().map(|w| closure.explain(w)).unwrap_or_default();
    Verdict {
        event,
        member,
        property,
        pass: witness.is_none(),
        checked: targets.len(),
        witness,
        derivation,
    }
}
