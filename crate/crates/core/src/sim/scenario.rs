//! Scenario documents, the event-by-event runner and its cost accounting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audit::{audit_secrecy, AuditReport};
use super::predict::{predict_costs, EventPrediction};
use crate::batch::{batch_rekey, collect, BatchAlgorithm, Op};
use crate::error::{Error, Result};
use crate::keytree::{level_label, MemberId, NodeId};
use crate::schemes::{apply_plan_member, init_group, Content, Delivery, GroupState, MemberState, RekeyPlan, Scheme, SchemeId};
use crate::symcrypto::{concrete, Ciphertext, CryptoMode, CryptoParams, KeyTerm};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub scheme: SchemeId,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Hybrid only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_size: Option<usize>,
    /// Members `1..=initial_size` start in the group.
    pub initial_size: u32,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    /// Extra events drawn from the seeded generator after the listed ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_events: Option<RandomEvents>,
    #[serde(default)]
    pub batch: BatchMode,
    pub seed: u64,
    #[serde(default = "default_key_length")]
    pub key_length_bits: u32,
    #[serde(default = "default_mode")]
    pub crypto: CryptoMode,
}

fn default_degree() -> usize {
    2
}

fn default_key_length() -> u32 {
    128
}

fn default_mode() -> CryptoMode {
    CryptoMode::Symbolic
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub tick: u64,
    pub op: Op,
    pub member: MemberId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomEvents {
    pub count: usize,
    /// Upper bound on the group size; defaults to twice the initial size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_size: Option<u32>,
}

/// `"individual"` or `{"interval": ticks, "algorithm": ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchMode {
    Individual(Individual),
    Periodic {
        interval: u64,
        algorithm: BatchAlgorithm,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Individual {
    #[serde(rename = "individual")]
    Individual,
}

impl Default for BatchMode {
    fn default() -> Self {
        BatchMode::Individual(Individual::Individual)
    }
}

impl ScenarioConfig {
    /// A config with no events and default settings.
    pub fn new(scheme: SchemeId, initial_size: u32, seed: u64) -> Self {
        ScenarioConfig {
            version: SCENARIO_VERSION,
            scheme,
            degree: default_degree(),
            cluster_size: None,
            initial_size,
            events: Vec::new(),
            random_events: None,
            batch: BatchMode::default(),
            seed,
            key_length_bits: default_key_length(),
            crypto: default_mode(),
        }
    }

    pub fn build_scheme(&self) -> Result<Scheme> {
        Scheme::new(self.scheme, self.degree, self.cluster_size)
    }

    pub fn crypto_params(&self) -> Result<CryptoParams> {
        CryptoParams::new(self.key_length_bits, self.crypto)
    }

    /// Listed events followed by the generated ones, checked against the
    /// running membership.
    pub fn expand_events(&self) -> Result<Vec<EventSpec>> {
        if self.version != SCENARIO_VERSION {
            return Err(Error::InvalidScenario(format!("unsupported version {}, expected {SCENARIO_VERSION}", self.version)));
        }
        if self.initial_size == 0 {
            return Err(Error::InvalidScenario("initial_size must be at least 1".into()));
        }
        let mut members: BTreeSet<MemberId> = (1..=self.initial_size).map(MemberId).collect();
        let mut ever: BTreeSet<MemberId> = members.clone();
        let mut last_tick = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.tick < last_tick {
                return Err(Error::InvalidScenario(format!("event {i}: tick {} goes backwards", e.tick)));
            }
            last_tick = e.tick;
            match e.op {
                Op::Join if !members.insert(e.member) => {
                    return Err(Error::InvalidScenario(format!("event {i}: {} joins but is already a member", e.member)));
                }
                Op::Leave if !members.remove(&e.member) => {
                    return Err(Error::InvalidScenario(format!("event {i}: {} leaves but is not a member", e.member)));
                }
                Op::Leave if members.is_empty() => {
                    return Err(Error::InvalidScenario(format!("event {i}: the last member leaves")));
                }
                _ => {}
            }
            ever.insert(e.member);
        }
        let mut out = self.events.clone();
        let Some(random) = self.random_events else { return Ok(out) };
        let max = random.max_size.unwrap_or(self.initial_size.saturating_mul(2).max(4)) as usize;
        if max < 2 {
            return Err(Error::InvalidScenario("random_events.max_size must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut next = ever.iter().next_back().map_or(1, |m| m.0 + 1);
        let first = if self.events.is_empty() { 0 } else { last_tick + 1 };
        for tick in (first..).take(random.count) {
            let size = members.len();
            let join = size <= 2 || (size < max && rng.gen_bool(0.5));
            let member = if join {
                let departed: Vec<MemberId> = ever.difference(&members).copied().collect();
                if !departed.is_empty() && rng.gen_bool(0.5) {
                    departed[rng.gen_range(0..departed.len())]
                } else {
                    next += 1;
                    MemberId(next - 1)
                }
            } else {
                *members.iter().choose(&mut rng).expect("group is not empty")
            };
            if join {
                members.insert(member);
                ever.insert(member);
            } else {
                members.remove(&member);
            }
            out.push(EventSpec { tick, op: if join { Op::Join } else { Op::Leave }, member });
        }
        Ok(out)
    }
}

/// Measured cost of one event next to its prediction, when there is one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCost {
    pub index: usize,
    pub tick: u64,
    pub joins: usize,
    pub leaves: usize,
    pub unicast_count: u64,
    pub multicast_count: u64,
    pub messages: u64,
    pub payload_keys: u64,
    /// `payload_keys * key_length_bits`.
    pub bits: u64,
    pub controller_keys_stored: u64,
    pub max_member_keys_stored: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<PredictedCost>,
    /// Concrete mode only: bytes of materialized payload keys.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concrete_payload_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedCost {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unicast_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multicast_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub messages: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_keys: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_keys_stored: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_member_keys_stored: Option<u64>,
}

impl PredictedCost {
    fn is_empty(&self) -> bool {
        self.messages.is_none() && self.controller_keys_stored.is_none()
    }

    fn set_event(&mut self, e: EventPrediction, key_bits: u32) {
        self.unicast_count = Some(e.unicast);
        self.multicast_count = Some(e.multicast);
        self.messages = Some(e.messages());
        self.payload_keys = Some(e.payload_keys);
        self.bits = Some(e.payload_keys * u64::from(key_bits));
    }

    /// True when every predicted field equals the measured one.
    pub fn matches(&self, c: &EventCost) -> bool {
        let eq = |p: Option<u64>, m: u64| p.is_none_or(|p| p == m);
        eq(self.unicast_count, c.unicast_count)
            && eq(self.multicast_count, c.multicast_count)
            && eq(self.messages, c.messages)
            && eq(self.payload_keys, c.payload_keys)
            && eq(self.bits, c.bits)
            && eq(self.controller_keys_stored, c.controller_keys_stored)
            && eq(self.max_member_keys_stored, c.max_member_keys_stored)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub unicast_count: u64,
    pub multicast_count: u64,
    pub messages: u64,
    pub payload_keys: u64,
    pub bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub version: u32,
    pub scheme: String,
    pub key_length_bits: u32,
    pub initial_size: u32,
    pub initial_controller_keys: u64,
    pub initial_max_member_keys: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_predicted: Option<PredictedCost>,
    pub events: Vec<EventCost>,
    pub totals: CostTotals,
}

impl CostReport {
    /// Events whose measurement differs from the prediction.
    pub fn mismatches(&self) -> impl Iterator<Item = &EventCost> {
        self.events.iter().filter(|e| e.predicted.as_ref().is_some_and(|p| !p.matches(e)))
    }
}

/// Keys a member held at a point of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub member: MemberId,
    pub keys: Vec<KeyTerm>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMessage {
    pub seq: u64,
    pub kind: Delivery,
    pub content: Content,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_label: Option<String>,
    pub target_node: NodeId,
    pub target_label: String,
    pub payload: Vec<String>,
    pub recipients: Vec<MemberId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_position: Option<NodeId>,
    pub ciphertext: Ciphertext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub index: usize,
    pub tick: u64,
    pub joins: Vec<MemberId>,
    pub leaves: Vec<MemberId>,
    pub group_key: KeyTerm,
    /// Leavers with the keys they held when they left.
    pub departed: Vec<Persona>,
    /// Joiners with the keys they hold right after joining.
    pub joined: Vec<Persona>,
    pub messages: Vec<TraceMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub version: u32,
    pub scheme: String,
    pub initial_members: Vec<MemberId>,
    pub initial_group_key: KeyTerm,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn ciphertexts(&self) -> impl Iterator<Item = &Ciphertext> {
        self.events.iter().flat_map(|e| e.messages.iter().map(|m| &m.ciphertext))
    }
}

fn trace_messages(plan: &RekeyPlan) -> Vec<TraceMessage> {
    let k = plan.degree;
    plan.messages
        .iter()
        .map(|m| TraceMessage {
            seq: m.ciphertext.seq,
            kind: m.kind,
            content: m.content,
            enc_node: m.enc_node,
            enc_label: m.enc_node.map(|n| level_label(n, k)),
            target_node: m.ciphertext.target_node,
            target_label: level_label(m.ciphertext.target_node, k),
            payload: m.ciphertext.payload.iter().map(ToString::to_string).collect(),
            recipients: m.recipients.iter().copied().collect(),
            new_position: m.new_position,
            ciphertext: m.ciphertext.clone(),
        })
        .collect()
}

/// Whether the closed forms describe the current configuration.
fn is_full(state: &GroupState) -> bool {
    match state.scheme() {
        Scheme::Simple | Scheme::Gkmp => true,
        _ => state.tree().is_full(),
    }
}

fn max_member_keys(views: &BTreeMap<MemberId, MemberState>) -> u64 {
    views.values().map(|v| v.key_count() as u64).max().unwrap_or(0)
}

fn storage_prediction(state: &GroupState) -> Option<(u64, u64)> {
    if !is_full(state) {
        return None;
    }
    predict_costs(state.scheme(), state.len() as u64).ok().map(|p| (p.controller_storage, p.member_storage))
}

struct Runner {
    state: GroupState,
    views: BTreeMap<MemberId, MemberState>,
    params: CryptoParams,
    seed: u64,
    costs: Vec<EventCost>,
    events: Vec<TraceEvent>,
}

impl Runner {
    /// Replays `plan` for every member and checks each against the
    /// controller's view.
    fn settle(&mut self, plan: &RekeyPlan) -> Result<(Vec<Persona>, Vec<Persona>)> {
        let mut departed = Vec::new();
        for m in &plan.departed {
            let v = self.views.remove(m).ok_or(Error::MemberNotFound(*m))?;
            departed.push(Persona { member: *m, keys: v.held().into_iter().collect() });
        }
        let mut next = BTreeMap::new();
        let mut joined = Vec::new();
        for m in self.state.members() {
            let start = match self.views.get(&m) {
                Some(v) if !plan.joined.contains_key(&m) => v.clone(),
                _ => self.state.joiner_view(m)?,
            };
            let after = apply_plan_member(&start, plan);
            let expect = self.state.member_view(m)?;
            if after != expect {
                return Err(Error::InternalInconsistency(format!(
                    "{m} ends with {:?} but should hold {:?}",
                    after.known, expect.known
                )));
            }
            if plan.joined.contains_key(&m) {
                joined.push(Persona { member: m, keys: after.held().into_iter().collect() });
            }
            next.insert(m, after);
        }
        self.views = next;
        Ok((departed, joined))
    }

    fn record(
        &mut self,
        tick: u64,
        plan: RekeyPlan,
        joins: Vec<MemberId>,
        leaves: Vec<MemberId>,
        event_prediction: Option<EventPrediction>,
    ) -> Result<()> {
        let (departed, joined) = self.settle(&plan)?;
        let index = self.events.len();
        let payload_keys = plan.payload_keys() as u64;
        let mut predicted = PredictedCost {
            unicast_count: None,
            multicast_count: None,
            messages: None,
            payload_keys: None,
            bits: None,
            controller_keys_stored: None,
            max_member_keys_stored: None,
        };
        if let Some(e) = event_prediction {
            predicted.set_event(e, self.params.key_length_bits);
        }
        if let Some((c, m)) = storage_prediction(&self.state) {
            predicted.controller_keys_stored = Some(c);
            predicted.max_member_keys_stored = Some(m);
        }
        let concrete_payload_bytes = (self.params.mode == CryptoMode::Concrete).then(|| {
            plan.messages
                .iter()
                .flat_map(|m| &m.ciphertext.payload)
                .map(|t| concrete::materialize(t, self.seed, self.params.key_length_bits).len() as u64)
                .sum()
        });
        self.costs.push(EventCost {
            index,
            tick,
            joins: joins.len(),
            leaves: leaves.len(),
            unicast_count: plan.unicast_count() as u64,
            multicast_count: plan.multicast_count() as u64,
            messages: plan.messages.len() as u64,
            payload_keys,
            bits: self.params.message_bits(payload_keys),
            controller_keys_stored: self.state.controller_storage() as u64,
            max_member_keys_stored: max_member_keys(&self.views),
            predicted: (!predicted.is_empty()).then_some(predicted),
            concrete_payload_bytes,
        });
        let group_key = self
            .state
            .group_key()
            .cloned()
            .ok_or_else(|| Error::InternalInconsistency("group without a group key".into()))?;
        self.events.push(TraceEvent {
            index,
            tick,
            joins,
            leaves,
            group_key,
            departed,
            joined,
            messages: trace_messages(&plan),
        });
        Ok(())
    }

    fn single(&mut self, e: &EventSpec) -> Result<()> {
        let scheme = self.state.scheme();
        match e.op {
            Op::Leave => {
                let prediction = is_full(&self.state)
                    .then(|| predict_costs(scheme, self.state.len() as u64).ok())
                    .flatten()
                    .map(|p| p.leave);
                let plan = self.state.plan_leave(e.member)?;
                self.record(e.tick, plan, Vec::new(), vec![e.member], prediction)
            }
            Op::Join => {
                let plan = self.state.plan_join(e.member)?;
                let prediction = is_full(&self.state)
                    .then(|| predict_costs(scheme, self.state.len() as u64).ok())
                    .flatten()
                    .map(|p| p.join);
                self.record(e.tick, plan, vec![e.member], Vec::new(), prediction)
            }
        }
    }

    fn window(&mut self, tick: u64, index: u64, events: &[(Op, MemberId)], algorithm: BatchAlgorithm) -> Result<()> {
        let req = collect(events, index);
        if req.is_empty() {
            return Ok(());
        }
        req.validate(&self.state)?;
        let plan = batch_rekey(&mut self.state, &req, algorithm)?;
        self.record(tick, plan, req.joins.iter().copied().collect(), req.leaves.iter().copied().collect(), None)
    }
}

/// Runs a scenario to completion. Every event is replayed on the member side
/// and checked; the trace is then audited.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<(CostReport, AuditReport, Trace)> {
    let (costs, trace) = simulate(cfg)?;
    let audit = audit_secrecy(&trace);
    Ok((costs, audit, trace))
}

/// [`run_scenario`] without the audit.
pub fn simulate(cfg: &ScenarioConfig) -> Result<(CostReport, Trace)> {
    let scheme = cfg.build_scheme()?;
    let params = cfg.crypto_params()?;
    let events = cfg.expand_events()?;
    let initial: Vec<MemberId> = (1..=cfg.initial_size).map(MemberId).collect();
    let (state, views) = init_group(scheme, &initial)?;
    let initial_group_key = state
        .group_key()
        .cloned()
        .ok_or_else(|| Error::InternalInconsistency("group without a group key".into()))?;
    let initial_predicted = storage_prediction(&state).map(|(c, m)| PredictedCost {
        unicast_count: None,
        multicast_count: None,
        messages: None,
        payload_keys: None,
        bits: None,
        controller_keys_stored: Some(c),
        max_member_keys_stored: Some(m),
    });
    let initial_controller_keys = state.controller_storage() as u64;
    let initial_max_member_keys = max_member_keys(&views);
    let mut run = Runner { state, views, params, seed: cfg.seed, costs: Vec::new(), events: Vec::new() };

    match cfg.batch {
        BatchMode::Individual(_) => {
            for e in &events {
                run.single(e)?;
            }
        }
        BatchMode::Periodic { interval, algorithm } => {
            if interval == 0 {
                return Err(Error::InvalidScenario("batch interval must be at least one tick".into()));
            }
            let mut windows: BTreeMap<u64, Vec<(Op, MemberId)>> = BTreeMap::new();
            for e in &events {
                windows.entry(e.tick / interval).or_default().push((e.op, e.member));
            }
            for (index, evs) in windows {
                let end = (index + 1) * interval - 1;
                run.window(end, index, &evs, algorithm)?;
            }
        }
    }

    let mut totals = CostTotals::default();
    for c in &run.costs {
        totals.unicast_count += c.unicast_count;
        totals.multicast_count += c.multicast_count;
        totals.messages += c.messages;
        totals.payload_keys += c.payload_keys;
        totals.bits += c.bits;
    }
    let report = CostReport {
        version: SCENARIO_VERSION,
        scheme: scheme.to_string(),
        key_length_bits: params.key_length_bits,
        initial_size: cfg.initial_size,
        initial_controller_keys,
        initial_max_member_keys,
        initial_predicted,
        events: run.costs,
        totals,
    };
    let trace = Trace {
        version: SCENARIO_VERSION,
        scheme: scheme.to_string(),
        initial_members: initial,
        initial_group_key,
        events: run.events,
    };
    Ok((report, trace))
}
