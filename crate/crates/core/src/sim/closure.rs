//! What an attacker can derive from a set of keys and observed ciphertexts.
//!
//! The closure is the least set containing the known keys that is closed
//! under: decrypting a ciphertext whose key is in the set, applying `H`, `L`
//! and `R` forward, and XOR. XOR is handled as linear algebra over GF(2):
//! a term is derivable when its operand vector lies in the span of the
//! derivable terms, which covers "two of {a, b, a^b} give the third" and every
//! longer combination. Terms are only ever considered inside a finite
//! universe (every subterm of the inputs and the queried targets), so the
//! fixpoint terminates.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::symcrypto::{Ciphertext, KeyTerm};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttackerView {
    pub known: BTreeSet<KeyTerm>,
    pub observed: Vec<Ciphertext>,
}

/// Closure restricted to the subterms of the view.
pub fn attacker_closure(view: &AttackerView) -> BTreeSet<KeyTerm> {
    let index = ClosureIndex::new(&view.observed, view.known.iter());
    index.run(&view.known, view.observed.len()).terms()
}

/// How a term entered the closure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Known,
    Decrypted { ct: usize },
    Forward { from: usize },
    Xor,
}

/// Interned term universe over a fixed list of ciphertexts. Build once per
/// trace, then run closures for many personas.
#[derive(Debug, Clone)]
pub struct ClosureIndex {
    terms: Vec<KeyTerm>,
    ids: HashMap<KeyTerm, usize>,
    cts: Vec<Ciphertext>,
    enc: Vec<usize>,
    payloads: Vec<Vec<usize>>,
    by_key: Vec<Vec<usize>>,
    /// One forward step from a term: `H`, `L`, `R` images inside the universe.
    succ: Vec<Vec<usize>>,
    /// For terms that take part in some XOR: operand atoms as column indices.
    columns: Vec<Option<Vec<usize>>>,
    xor_candidates: Vec<usize>,
    width: usize,
}

impl ClosureIndex {
    pub fn new<'a>(cts: &[Ciphertext], extra: impl IntoIterator<Item = &'a KeyTerm>) -> Self {
        let mut ix = ClosureIndex {
            terms: Vec::new(),
            ids: HashMap::new(),
            cts: cts.to_vec(),
            enc: Vec::new(),
            payloads: Vec::new(),
            by_key: Vec::new(),
            succ: Vec::new(),
            columns: Vec::new(),
            xor_candidates: Vec::new(),
            width: 0,
        };
        for ct in cts {
            let e = ix.intern(&ct.enc_key);
            let p = ct.payload.iter().map(|t| ix.intern(t)).collect();
            ix.enc.push(e);
            ix.payloads.push(p);
        }
        for t in extra {
            ix.intern(t);
        }
        ix.by_key = vec![Vec::new(); ix.terms.len()];
        for (i, e) in ix.enc.iter().enumerate() {
            ix.by_key[*e].push(i);
        }
        ix.index_xor();
        ix
    }

    /// Adds `t` (and its subterms) to the universe. Only valid before the
    /// XOR columns are built, or followed by [`Self::index_xor`].
    fn intern(&mut self, t: &KeyTerm) -> usize {
        if let Some(&id) = self.ids.get(t) {
            return id;
        }
        let mut subs = Vec::new();
        t.subterms(&mut subs);
        // deepest first so predecessors exist before their images
        for s in subs.into_iter().rev() {
            if self.ids.contains_key(&s) {
                continue;
            }
            let id = self.terms.len();
            self.terms.push(s.clone());
            self.ids.insert(s.clone(), id);
            self.succ.push(Vec::new());
            let pred = match &s {
                KeyTerm::HashIter { base, count } => Some(KeyTerm::hash_iter((**base).clone(), count - 1)),
                KeyTerm::GLeft(b) | KeyTerm::GRight(b) => Some((**b).clone()),
                _ => None,
            };
            if let Some(p) = pred {
                let pid = match self.ids.get(&p) {
                    Some(&pid) => pid,
                    None => self.intern(&p),
                };
                self.succ[pid].push(id);
            }
        }
        self.ids[t]
    }

    fn index_xor(&mut self) {
        let mut col_of: HashMap<usize, usize> = HashMap::new();
        let mut columns = vec![None; self.terms.len()];
        let mut candidates = BTreeSet::new();
        for (id, t) in self.terms.iter().enumerate() {
            if let KeyTerm::Xor(ops) = t {
                let mut cols = Vec::new();
                for op in ops {
                    let oid = self.ids[op];
                    let next = col_of.len();
                    let c = *col_of.entry(oid).or_insert(next);
                    cols.push(c);
                    candidates.insert(oid);
                }
                cols.sort();
                columns[id] = Some(cols);
                candidates.insert(id);
            }
        }
        for (&oid, &c) in &col_of {
            columns[oid] = Some(vec![c]);
        }
        self.columns = columns;
        self.xor_candidates = candidates.into_iter().collect();
        self.width = col_of.len();
    }

    pub fn ciphertexts(&self) -> &[Ciphertext] {
        &self.cts
    }

    /// Closure of `known` observing the first `observed` ciphertexts.
    pub fn run(&self, known: &BTreeSet<KeyTerm>, observed: usize) -> Closure<'_> {
        self.run_filtered(known, |i| i < observed)
    }

    /// Closure of `known` observing the ciphertexts selected by `observe`.
    pub fn run_filtered(&self, known: &BTreeSet<KeyTerm>, observe: impl Fn(usize) -> bool) -> Closure<'_> {
        let n = self.terms.len();
        let mut origin: Vec<Option<Origin>> = vec![None; n];
        let mut queue = VecDeque::new();
        let mut basis = Basis::new(self.width);
        let mut extra_known = Vec::new();
        for t in known {
            match self.ids.get(t) {
                Some(&id) => {
                    if origin[id].is_none() {
                        origin[id] = Some(Origin::Known);
                        queue.push_back(id);
                    }
                }
                None => extra_known.push(t.clone()),
            }
        }
        loop {
            let mut grew = false;
            while let Some(id) = queue.pop_front() {
                for &ct in &self.by_key[id] {
                    if !observe(ct) {
                        continue;
                    }
                    for &p in &self.payloads[ct] {
                        if origin[p].is_none() {
                            origin[p] = Some(Origin::Decrypted { ct });
                            queue.push_back(p);
                        }
                    }
                }
                for &s in &self.succ[id] {
                    if origin[s].is_none() {
                        origin[s] = Some(Origin::Forward { from: id });
                        queue.push_back(s);
                    }
                }
                if let Some(cols) = &self.columns[id] {
                    grew |= basis.insert(cols);
                }
            }
            if !grew {
                break;
            }
            for &c in &self.xor_candidates {
                if origin[c].is_none() {
                    if let Some(cols) = &self.columns[c] {
                        if basis.spans(cols) {
                            origin[c] = Some(Origin::Xor);
                            queue.push_back(c);
                        }
                    }
                }
            }
            if queue.is_empty() {
                break;
            }
        }
        Closure { index: self, origin, extra_known }
    }
}

/// Result of one closure run.
#[derive(Debug, Clone)]
pub struct Closure<'a> {
    index: &'a ClosureIndex,
    origin: Vec<Option<Origin>>,
    /// Known terms outside the universe; they cannot take part in anything.
    extra_known: Vec<KeyTerm>,
}

impl Closure<'_> {
    pub fn contains(&self, t: &KeyTerm) -> bool {
        match self.index.ids.get(t) {
            Some(&id) => self.origin[id].is_some(),
            None => self.extra_known.contains(t),
        }
    }

    pub fn terms(&self) -> BTreeSet<KeyTerm> {
        self.origin
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_some())
            .map(|(i, _)| self.index.terms[i].clone())
            .filter(|t| *t != KeyTerm::Zero)
            .chain(self.extra_known.iter().cloned())
            .collect()
    }

    /// Derivation steps for `t`, leaves first. Empty if `t` is not derivable.
    pub fn explain(&self, t: &KeyTerm) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        if let Some(&id) = self.index.ids.get(t) {
            self.explain_id(id, &mut out, &mut seen);
        }
        out
    }

    fn explain_id(&self, id: usize, out: &mut Vec<String>, seen: &mut BTreeSet<usize>) {
        if !seen.insert(id) {
            return;
        }
        let t = &self.index.terms[id];
        match self.origin[id] {
            None => {}
            Some(Origin::Known) => out.push(format!("held {t}")),
            Some(Origin::Decrypted { ct }) => {
                let c = &self.index.cts[ct];
                self.explain_id(self.index.enc[ct], out, seen);
                out.push(format!("decrypt message {} under {} -> {t}", c.seq, c.enc_key));
            }
            Some(Origin::Forward { from }) => {
                self.explain_id(from, out, seen);
                out.push(format!("apply one-way step to {} -> {t}", self.index.terms[from]));
            }
            Some(Origin::Xor) => out.push(format!("xor of derived terms -> {t}")),
        }
    }
}

/// Row-reduced GF(2) basis.
#[derive(Debug, Clone)]
struct Basis {
    words: usize,
    rows: Vec<(usize, Vec<u64>)>,
}

impl Basis {
    fn new(width: usize) -> Self {
        Basis { words: width.div_ceil(64).max(1), rows: Vec::new() }
    }

    fn vector(&self, cols: &[usize]) -> Vec<u64> {
        let mut v = vec![0u64; self.words];
        for c in cols {
            v[c / 64] ^= 1 << (c % 64);
        }
        v
    }

    fn reduce(&self, v: &mut [u64]) {
        for (pivot, row) in &self.rows {
            if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                v.iter_mut().zip(row).for_each(|(a, b)| *a ^= b);
            }
        }
    }

    fn insert(&mut self, cols: &[usize]) -> bool {
        let mut v = self.vector(cols);
        self.reduce(&mut v);
        let Some(pivot) = lowest_bit(&v) else { return false };
        // keep rows fully reduced against the new pivot
        for (_, row) in &mut self.rows {
            if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                row.iter_mut().zip(&v).for_each(|(a, b)| *a ^= b);
            }
        }
        self.rows.push((pivot, v));
        true
    }

    fn spans(&self, cols: &[usize]) -> bool {
        let mut v = self.vector(cols);
        self.reduce(&mut v);
        v.iter().all(|w| *w == 0)
    }
}

fn lowest_bit(v: &[u64]) -> Option<usize> {
    v.iter().enumerate().find(|(_, w)| **w != 0).map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}
