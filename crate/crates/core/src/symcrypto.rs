//! Symbolic key terms and encryption records.
//!
//! Keys are never random bytes here. A key is a [`KeyTerm`]: a fresh seed, a
//! hash iterate, one half of the length-doubling function `G`, or an XOR of
//! other terms. Terms are kept in a canonical form so that structural equality
//! is key equality, which is what lets the attacker closure in
//! [`crate::sim::closure`] decide secrecy exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keytree::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KeyTerm {
    /// Identity element of XOR.
    Zero,
    Fresh { tag: String, index: u64 },
    HashIter { base: Box<KeyTerm>, count: u32 },
    GLeft(Box<KeyTerm>),
    GRight(Box<KeyTerm>),
    /// Sorted, duplicate-free, at least two operands, none of them `Xor` or `Zero`.
    Xor(Vec<KeyTerm>),
}

impl KeyTerm {
    pub fn fresh(tag: impl Into<String>, index: u64) -> Self {
        KeyTerm::Fresh { tag: tag.into(), index }
    }

    /// `H^count(base)`, normalized.
    pub fn hash_iter(base: KeyTerm, count: u32) -> Self {
        if count == 0 {
            return base;
        }
        match base {
            KeyTerm::HashIter { base, count: inner } => KeyTerm::HashIter { base, count: inner + count },
            other => KeyTerm::HashIter { base: Box::new(other), count },
        }
    }

    pub fn g_left(base: KeyTerm) -> Self {
        KeyTerm::GLeft(Box::new(base))
    }

    pub fn g_right(base: KeyTerm) -> Self {
        KeyTerm::GRight(Box::new(base))
    }

    /// XOR of an arbitrary collection of (already canonical) terms.
    pub fn xor_all<I: IntoIterator<Item = KeyTerm>>(operands: I) -> Self {
        let mut parity: BTreeMap<KeyTerm, bool> = BTreeMap::new();
        let push = |t: KeyTerm, parity: &mut BTreeMap<KeyTerm, bool>| {
            let slot = parity.entry(t).or_insert(false);
            *slot = !*slot;
        };
        for t in operands {
            match t {
                KeyTerm::Zero => {}
                KeyTerm::Xor(inner) => inner.into_iter().for_each(|t| push(t, &mut parity)),
                other => push(other, &mut parity),
            }
        }
        let mut rest: Vec<KeyTerm> = parity.into_iter().filter(|(_, odd)| *odd).map(|(t, _)| t).collect();
        match rest.len() {
            0 => KeyTerm::Zero,
            1 => rest.pop().unwrap(),
            _ => KeyTerm::Xor(rest),
        }
    }

    /// Rebuilds the term bottom-up through the smart constructors.
    pub fn normalize(&self) -> KeyTerm {
        match self {
            KeyTerm::Zero | KeyTerm::Fresh { .. } => self.clone(),
            KeyTerm::HashIter { base, count } => KeyTerm::hash_iter(base.normalize(), *count),
            KeyTerm::GLeft(b) => KeyTerm::g_left(b.normalize()),
            KeyTerm::GRight(b) => KeyTerm::g_right(b.normalize()),
            KeyTerm::Xor(ops) => KeyTerm::xor_all(ops.iter().map(KeyTerm::normalize)),
        }
    }

    /// The term itself and every term nested inside it.
    pub fn subterms(&self, out: &mut Vec<KeyTerm>) {
        out.push(self.clone());
        match self {
            KeyTerm::Zero | KeyTerm::Fresh { .. } => {}
            KeyTerm::HashIter { base, count } => {
                // intermediate iterates are subterms too: H^2(r) contains H(r)
                for c in 1..*count {
                    out.push(KeyTerm::HashIter { base: base.clone(), count: c });
                }
                base.subterms(out);
            }
            KeyTerm::GLeft(b) | KeyTerm::GRight(b) => b.subterms(out),
            KeyTerm::Xor(ops) => ops.iter().for_each(|t| t.subterms(out)),
        }
    }
}

impl fmt::Display for KeyTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyTerm::Zero => write!(f, "0"),
            KeyTerm::Fresh { tag, index } => write!(f, "{tag}#{index}"),
            KeyTerm::HashIter { base, count: 1 } => write!(f, "H({base})"),
            KeyTerm::HashIter { base, count } => write!(f, "H^{count}({base})"),
            KeyTerm::GLeft(b) => write!(f, "L({b})"),
            KeyTerm::GRight(b) => write!(f, "R({b})"),
            KeyTerm::Xor(ops) => {
                write!(f, "(")?;
                for (i, t) in ops.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ^ ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Per-run source of fresh terms. Indices count up per tag from zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeySource {
    counters: BTreeMap<String, u64>,
}

impl KeySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh_key(&mut self, tag: &str) -> KeyTerm {
        let next = self.counters.entry(tag.to_string()).or_insert(0);
        let t = KeyTerm::fresh(tag, *next);
        *next += 1;
        t
    }
}

pub fn hash_h(t: &KeyTerm) -> KeyTerm {
    KeyTerm::hash_iter(t.clone(), 1)
}

/// `G(t) = L(t) || R(t)`.
pub fn owf_g(t: &KeyTerm) -> (KeyTerm, KeyTerm) {
    (KeyTerm::g_left(t.clone()), KeyTerm::g_right(t.clone()))
}

pub fn xor_terms(a: &KeyTerm, b: &KeyTerm) -> KeyTerm {
    KeyTerm::xor_all([a.clone(), b.clone()])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    /// One key, except for a GKMP key packet which carries two.
    pub payload: Vec<KeyTerm>,
    pub enc_key: KeyTerm,
    pub target_node: NodeId,
    pub seq: u64,
}

pub fn encrypt(payload: Vec<KeyTerm>, key: &KeyTerm, target: NodeId, seq: u64) -> Ciphertext {
    Ciphertext { payload, enc_key: key.clone(), target_node: target, seq }
}

impl Ciphertext {
    pub fn decrypt(&self, known: &BTreeSet<KeyTerm>) -> Result<&[KeyTerm]> {
        if known.contains(&self.enc_key) {
            Ok(&self.payload)
        } else {
            Err(Error::NotDecryptable)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CryptoMode {
    Symbolic,
    Concrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CryptoParams {
    pub key_length_bits: u32,
    pub mode: CryptoMode,
}

impl CryptoParams {
    pub fn new(key_length_bits: u32, mode: CryptoMode) -> Result<Self> {
        if key_length_bits == 0 {
            return Err(Error::InvalidParams("key length must be positive".into()));
        }
        Ok(Self { key_length_bits, mode })
    }

    /// Size of a message carrying `payload_keys` keys; headers are not counted.
    pub fn message_bits(&self, payload_keys: u64) -> u64 {
        payload_keys * u64::from(self.key_length_bits)
    }
}

impl Default for CryptoParams {
    fn default() -> Self {
        Self { key_length_bits: 128, mode: CryptoMode::Symbolic }
    }
}

/// Byte-level rendering of terms. Used for sizing and as a cross-check of the
/// symbolic model; it never feeds the secrecy auditor.
pub mod concrete {
    use sha2::{Digest, Sha256};

    use super::KeyTerm;

    fn expand(domain: &[u8], input: &[u8], bits: u32) -> Vec<u8> {
        let nbytes = bits.div_ceil(8) as usize;
        let mut out = Vec::with_capacity(nbytes);
        let mut block = 0u32;
        while out.len() < nbytes {
            let mut h = Sha256::new();
            h.update(domain);
            h.update(block.to_be_bytes());
            h.update(input);
            out.extend_from_slice(&h.finalize());
            block += 1;
        }
        out.truncate(nbytes);
        mask(&mut out, bits);
        out
    }

    fn mask(bytes: &mut [u8], bits: u32) {
        let spare = (bytes.len() * 8) as u32 - bits;
        if spare > 0 {
            if let Some(last) = bytes.last_mut() {
                *last &= 0xffu8 << spare;
            }
        }
    }

    /// Materializes `term` as `bits` bits under the run `seed`.
    pub fn materialize(term: &KeyTerm, seed: u64, bits: u32) -> Vec<u8> {
        match term {
            KeyTerm::Zero => vec![0u8; bits.div_ceil(8) as usize],
            KeyTerm::Fresh { tag, index } => {
                let mut input = seed.to_be_bytes().to_vec();
                input.extend_from_slice(&index.to_be_bytes());
                input.extend_from_slice(tag.as_bytes());
                expand(b"gkm/fresh", &input, bits)
            }
            KeyTerm::HashIter { base, count } => {
                let mut v = materialize(base, seed, bits);
                for _ in 0..*count {
                    v = expand(b"gkm/H", &v, bits);
                }
                v
            }
            KeyTerm::GLeft(b) => expand(b"gkm/G/left", &materialize(b, seed, bits), bits),
            KeyTerm::GRight(b) => expand(b"gkm/G/right", &materialize(b, seed, bits), bits),
            KeyTerm::Xor(ops) => {
                let mut acc = vec![0u8; bits.div_ceil(8) as usize];
                for t in ops {
                    for (a, b) in acc.iter_mut().zip(materialize(t, seed, bits)) {
                        *a ^= b;
                    }
                }
                acc
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r() -> KeyTerm {
        KeyTerm::fresh("r", 0)
    }

    #[test]
    fn fresh_counter_starts_at_zero_per_tag() {
        let mut ks = KeySource::new();
        assert_eq!(ks.fresh_key("r"), KeyTerm::fresh("r", 0));
        assert_ne!(ks.fresh_key("r"), KeyTerm::fresh("r", 0));
        assert_eq!(ks.fresh_key("D"), KeyTerm::fresh("D", 0));
    }

    #[test]
    fn fresh_sequence_replays() {
        let run = || {
            let mut ks = KeySource::new();
            (0..20).map(|i| ks.fresh_key(if i % 3 == 0 { "a" } else { "b" })).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hash_iterates_collapse() {
        assert_eq!(hash_h(&hash_h(&r())), KeyTerm::hash_iter(r(), 2));
        let mut t = r();
        for _ in 0..5 {
            t = hash_h(&t);
        }
        assert_eq!(t, KeyTerm::hash_iter(r(), 5));
        assert_ne!(KeyTerm::hash_iter(r(), 2), KeyTerm::hash_iter(r(), 3));
    }

    #[test]
    fn g_halves() {
        let (l, rr) = owf_g(&r());
        assert_eq!(rr, KeyTerm::GRight(Box::new(r())));
        assert_ne!(l, rr);
        assert_eq!(owf_g(&rr).1, KeyTerm::g_right(KeyTerm::g_right(r())));
        assert_eq!(owf_g(&r()).0, owf_g(&r()).0);
    }

    #[test]
    fn xor_laws() {
        let k = KeyTerm::fresh("k", 3);
        let d = KeyTerm::fresh("D", 0);
        let kd = xor_terms(&k, &d);
        assert_eq!(xor_terms(&kd, &d), k);
        assert_eq!(kd, xor_terms(&d, &k));
        assert_eq!(xor_terms(&k, &k), KeyTerm::Zero);
        assert_eq!(KeyTerm::xor_all([k.clone()]), k);
        assert_eq!(KeyTerm::xor_all([]), KeyTerm::Zero);
        assert_eq!(kd, KeyTerm::Xor(vec![d.clone(), k.clone()]));
    }

    #[test]
    fn decrypt_requires_the_key() {
        let k11 = KeyTerm::fresh("k", 1);
        let k0 = KeyTerm::fresh("k", 0);
        let ct = encrypt(vec![k0.clone()], &k11, NodeId(0), 0);
        let mut known = BTreeSet::new();
        assert_eq!(ct.decrypt(&known), Err(Error::NotDecryptable));
        known.insert(KeyTerm::fresh("k", 2));
        assert_eq!(ct.decrypt(&known), Err(Error::NotDecryptable));
        known.insert(k11);
        assert_eq!(ct.decrypt(&known).unwrap(), &[k0]);
    }

    #[test]
    fn message_bits_scale_with_payload() {
        let p = CryptoParams::new(128, CryptoMode::Symbolic).unwrap();
        assert_eq!(p.message_bits(3), 384);
        assert!(CryptoParams::new(0, CryptoMode::Concrete).is_err());
    }

    #[test]
    fn concrete_mode_respects_xor_and_hash_algebra() {
        let k = KeyTerm::fresh("k", 0);
        let d = KeyTerm::fresh("D", 0);
        let lhs = concrete::materialize(&xor_terms(&xor_terms(&k, &d), &d), 7, 100);
        assert_eq!(lhs, concrete::materialize(&k, 7, 100));
        assert_eq!(lhs.len(), 13);
        assert_eq!(
            concrete::materialize(&hash_h(&hash_h(&k)), 7, 256),
            concrete::materialize(&KeyTerm::hash_iter(k.clone(), 2), 7, 256)
        );
        assert_ne!(concrete::materialize(&k, 7, 128), concrete::materialize(&d, 7, 128));
    }

    /// Raw, possibly non-canonical term trees.
    fn raw_term() -> impl Strategy<Value = KeyTerm> {
        let leaf = prop_oneof![
            Just(KeyTerm::Zero),
            (0u64..4).prop_map(|i| KeyTerm::fresh("a", i)),
            (0u64..3).prop_map(|i| KeyTerm::fresh("b", i)),
        ];
        leaf.prop_recursive(6, 64, 4, |inner| {
            prop_oneof![
                (inner.clone(), 1u32..4)
                    .prop_map(|(b, c)| KeyTerm::HashIter { base: Box::new(b), count: c }),
                inner.clone().prop_map(|b| KeyTerm::GLeft(Box::new(b))),
                inner.clone().prop_map(|b| KeyTerm::GRight(Box::new(b))),
                prop::collection::vec(inner, 0..4).prop_map(KeyTerm::Xor),
            ]
        })
    }

    fn is_canonical(t: &KeyTerm) -> bool {
        match t {
            KeyTerm::Zero | KeyTerm::Fresh { .. } => true,
            KeyTerm::HashIter { base, count } => {
                *count >= 1 && !matches!(**base, KeyTerm::HashIter { .. }) && is_canonical(base)
            }
            KeyTerm::GLeft(b) | KeyTerm::GRight(b) => is_canonical(b),
            KeyTerm::Xor(ops) => {
                ops.len() >= 2
                    && ops.windows(2).all(|w| w[0] < w[1])
                    && ops.iter().all(|o| !matches!(o, KeyTerm::Xor(_) | KeyTerm::Zero) && is_canonical(o))
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normalize_is_idempotent_and_canonical(t in raw_term()) {
            let n = t.normalize();
            prop_assert!(is_canonical(&n));
            prop_assert_eq!(n.normalize(), n);
        }

        #[test]
        fn normalize_is_confluent(a in raw_term(), b in raw_term(), c in raw_term()) {
            // xor grouping and operand order must not matter
            let left = KeyTerm::xor_all([KeyTerm::xor_all([a.normalize(), b.normalize()]), c.normalize()]);
            let right = KeyTerm::xor_all([a.normalize(), KeyTerm::xor_all([c.normalize(), b.normalize()])]);
            prop_assert_eq!(&left, &right);
            let raw = KeyTerm::Xor(vec![KeyTerm::Xor(vec![a, b]), c]);
            prop_assert_eq!(raw.normalize(), left);
        }

        #[test]
        fn hash_iterates_compose(t in raw_term(), x in 0u32..5, y in 0u32..5) {
            let t = t.normalize();
            prop_assert_eq!(
                KeyTerm::hash_iter(KeyTerm::hash_iter(t.clone(), x), y),
                KeyTerm::hash_iter(t, x + y)
            );
        }
    }
}
