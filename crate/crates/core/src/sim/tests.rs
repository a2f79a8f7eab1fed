use std::collections::BTreeSet;

use super::*;
use crate::batch::{BatchAlgorithm, Op};
use crate::keytree::MemberId;
use crate::schemes::{init_group, Scheme, SchemeId};
use crate::symcrypto::CryptoMode;
use crate::Error;

fn leave(tick: u64, m: u32) -> EventSpec {
    EventSpec { tick, op: Op::Leave, member: MemberId(m) }
}

fn join(tick: u64, m: u32) -> EventSpec {
    EventSpec { tick, op: Op::Join, member: MemberId(m) }
}

fn cfg(scheme: SchemeId, degree: usize, n: u32, events: Vec<EventSpec>) -> ScenarioConfig {
    ScenarioConfig { degree, events, ..ScenarioConfig::new(scheme, n, 7) }
}

#[test]
fn lkh_leaver_cannot_reach_new_group_key() {
    let (mut state, views) = init_group(Scheme::Lkh { degree: 2 }, &(1..=8).map(MemberId).collect::<Vec<_>>()).unwrap();
    let known = views[&MemberId(1)].held();
    assert_eq!(known.len(), 4);
    let plan = state.plan_leave(MemberId(1)).unwrap();
    let view = AttackerView { known, observed: plan.messages.iter().map(|m| m.ciphertext.clone()).collect() };
    let closure = attacker_closure(&view);
    assert!(!closure.contains(plan.new_group_key.as_ref().unwrap()));
    // nothing beyond what M1 already had
    assert_eq!(closure, view.known);
}

#[test]
fn gkmp_leaver_reaches_new_group_key() {
    let (mut state, views) = init_group(Scheme::Gkmp, &(1..=4).map(MemberId).collect::<Vec<_>>()).unwrap();
    let known = views[&MemberId(2)].held();
    let plan = state.plan_leave(MemberId(2)).unwrap();
    let view = AttackerView { known, observed: plan.messages.iter().map(|m| m.ciphertext.clone()).collect() };
    let closure = attacker_closure(&view);
    assert!(closure.contains(plan.new_group_key.as_ref().unwrap()));
    assert!(closure.contains(state.gkek().unwrap()));
}

#[test]
fn lkh_single_leave_matches_prediction() {
    let (report, audit, trace) = run_scenario(&cfg(SchemeId::Lkh, 2, 8, vec![leave(0, 1)])).unwrap();
    let e = &report.events[0];
    assert_eq!(e.messages, 5);
    assert_eq!(e.predicted.as_ref().unwrap().messages, Some(5));
    assert_eq!(report.mismatches().count(), 0);
    assert_eq!(e.bits, 5 * 128);
    assert!(audit.passed());
    assert_eq!(trace.events[0].messages.len(), 5);
    assert_eq!(trace.events[0].messages[0].enc_label.as_deref(), Some("K_{3,2}"));
    assert_eq!(report.initial_predicted.as_ref().unwrap().controller_keys_stored, Some(15));
    assert_eq!(report.initial_controller_keys, 15);
    assert_eq!(report.initial_max_member_keys, 4);
}

#[test]
fn ihc_leave_and_rejoin_match_prediction() {
    let (report, audit, _) = run_scenario(&cfg(SchemeId::Ihc, 3, 27, vec![leave(0, 5), join(1, 5)])).unwrap();
    assert_eq!((report.events[0].messages, report.events[1].messages), (6, 4));
    assert!(report.events.iter().all(|e| e.predicted.is_some()));
    assert_eq!(report.mismatches().count(), 0);
    assert_eq!(report.events[1].predicted.as_ref().unwrap().controller_keys_stored, Some(40));
    assert!(audit.passed());
    assert_eq!(audit.verdicts.len(), 2);
}

#[test]
fn hybrid_leave_costs_five() {
    let mut c = cfg(SchemeId::Hybrid, 2, 24, vec![leave(0, 10)]);
    c.cluster_size = Some(3);
    let (report, audit, _) = run_scenario(&c).unwrap();
    assert_eq!(report.events[0].payload_keys, 5);
    assert_eq!(report.initial_controller_keys, 23);
    assert_eq!(report.mismatches().count(), 0);
    assert!(audit.passed());
}

#[test]
fn simple_trace_passes() {
    let mut c = cfg(SchemeId::Simple, 2, 6, Vec::new());
    c.random_events = Some(RandomEvents { count: 30, max_size: Some(10) });
    let (report, audit, _) = run_scenario(&c).unwrap();
    assert_eq!(report.events.len(), 30);
    assert!(audit.passed());
    assert!(audit.of(Property::Forward).count() > 0 && audit.of(Property::Backward).count() > 0);
    assert_eq!(report.mismatches().count(), 0);
}

#[test]
fn gkmp_fails_forward_secrecy_on_every_leave() {
    let mut c = cfg(SchemeId::Gkmp, 2, 6, Vec::new());
    c.random_events = Some(RandomEvents { count: 20, max_size: Some(10) });
    let (report, audit, trace) = run_scenario(&c).unwrap();
    let leaves: usize = trace.events.iter().map(|e| e.leaves.len()).sum();
    assert!(leaves > 0);
    let forward: Vec<_> = audit.of(Property::Forward).collect();
    assert_eq!(forward.len(), leaves);
    for v in forward {
        assert!(!v.pass);
        assert!(v.witness.is_some());
        assert!(v.derivation.iter().any(|s| s.starts_with("held gkek")));
    }
    assert!(audit.of(Property::Backward).all(|v| v.pass));
    assert_eq!(report.mismatches().count(), 0);
}

#[test]
fn canary_reused_kek_is_flagged() {
    let (_, audit, mut trace) = run_scenario(&cfg(SchemeId::Lkh, 2, 8, vec![leave(0, 1), leave(1, 4)])).unwrap();
    assert!(audit.passed());
    // re-encrypt the new group key under a key the first leaver still holds
    let ev = &mut trace.events[0];
    let stale = ev.departed[0].keys.iter().find(|k| k.to_string().starts_with("kek")).unwrap().clone();
    let msg = ev.messages.iter_mut().find(|m| m.target_node == crate::NodeId::ROOT).unwrap();
    msg.ciphertext.enc_key = stale;
    let audit = audit_secrecy(&trace);
    let fail: Vec<_> = audit.failures().collect();
    assert_eq!(fail.len(), 1);
    assert_eq!((fail[0].member, fail[0].property), (MemberId(1), Property::Forward));
    assert!(fail[0].derivation.len() >= 2);
}

#[test]
fn rejoin_does_not_count_as_a_breach() {
    let events = vec![leave(0, 3), join(1, 9), join(2, 3), leave(3, 3), join(4, 3)];
    for scheme in SchemeId::ALL {
        let mut c = cfg(scheme, 2, 4, events.clone());
        c.cluster_size = Some(2);
        let (_, audit, _) = run_scenario(&c).unwrap();
        let expect = scheme != SchemeId::Gkmp;
        assert_eq!(audit.passed(), expect, "{scheme}");
    }
}

#[test]
fn batch_mode_routes_windows() {
    let mut c = cfg(SchemeId::Lkh, 2, 8, vec![leave(0, 2), leave(1, 6), join(5, 20), leave(6, 3), join(7, 21)]);
    c.batch = BatchMode::Periodic { interval: 4, algorithm: BatchAlgorithm::LamGouda };
    let (report, audit, trace) = run_scenario(&c).unwrap();
    assert_eq!(report.events.len(), 2);
    assert_eq!(report.events[0].payload_keys, 8);
    assert_eq!((trace.events[0].leaves.len(), trace.events[1].joins.len()), (2, 2));
    assert_eq!(trace.events[0].tick, 3);
    assert!(audit.passed());

    c.scheme = SchemeId::Ihc;
    assert!(matches!(run_scenario(&c), Err(Error::InvalidParams(_))));
}

#[test]
fn inconsistent_events_rejected() {
    for events in [vec![join(0, 1)], vec![leave(0, 9)], vec![leave(0, 1), leave(1, 1)], vec![leave(3, 1), join(2, 1)]] {
        let err = run_scenario(&cfg(SchemeId::Lkh, 2, 4, events)).unwrap_err();
        assert!(matches!(err, Error::InvalidScenario(_)), "{err:?}");
    }
    let err = run_scenario(&cfg(SchemeId::Lkh, 2, 1, vec![leave(0, 1)])).unwrap_err();
    assert!(matches!(err, Error::InvalidScenario(_)));
    let mut c = cfg(SchemeId::Lkh, 2, 4, Vec::new());
    c.version = 2;
    assert!(matches!(run_scenario(&c), Err(Error::InvalidScenario(_))));
    c.version = 1;
    c.initial_size = 0;
    assert!(matches!(run_scenario(&c), Err(Error::InvalidScenario(_))));
    let mut c = cfg(SchemeId::Ofc, 3, 4, Vec::new());
    assert!(matches!(run_scenario(&c), Err(Error::InvalidParams(_))));
    c.degree = 2;
    c.key_length_bits = 0;
    assert!(matches!(run_scenario(&c), Err(Error::InvalidParams(_))));
}

#[test]
fn scenario_documents_parse() {
    let doc = r#"{
        "version": 1, "scheme": "sdlkh", "degree": 3, "initial_size": 9, "seed": 4,
        "events": [{"tick": 0, "op": "leave", "member": 2}],
        "batch": "individual"
    }"#;
    let c: ScenarioConfig = serde_json::from_str(doc).unwrap();
    assert_eq!(c.scheme, SchemeId::SdLkh);
    assert_eq!(c.events, vec![leave(0, 2)]);
    assert_eq!(c.key_length_bits, 128);
    let round: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(round, c);

    let doc = r#"{"version": 1, "scheme": "lkh", "initial_size": 8, "seed": 1,
        "batch": {"interval": 2, "algorithm": "balanced_improved"}}"#;
    let c: ScenarioConfig = serde_json::from_str(doc).unwrap();
    assert_eq!(c.batch, BatchMode::Periodic { interval: 2, algorithm: BatchAlgorithm::BalancedImproved });

    for bad in [
        r#"{"version": 1, "scheme": "lkh", "initial_size": 8}"#,
        r#"{"version": 1, "scheme": "lkh", "initial_size": 8, "seed": 1, "colour": 3}"#,
        r#"{"version": 1, "scheme": "nope", "initial_size": 8, "seed": 1}"#,
        r#"{"version": 1, "scheme": "lkh", "initial_size": 8, "seed": 1, "batch": "sometimes"}"#,
    ] {
        assert!(serde_json::from_str::<ScenarioConfig>(bad).is_err(), "{bad}");
    }
}

#[test]
fn replay_is_bit_identical() {
    for scheme in SchemeId::ALL {
        let mut c = cfg(scheme, 2, 10, Vec::new());
        c.cluster_size = Some(2);
        c.random_events = Some(RandomEvents { count: 25, max_size: None });
        let a = run_scenario(&c).unwrap();
        let b = run_scenario(&c).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        c.seed += 1;
        let other = run_scenario(&c).unwrap();
        assert_ne!(serde_json::to_string(&a.2).unwrap(), serde_json::to_string(&other.2).unwrap(), "{scheme}");
    }
}

#[test]
fn random_events_respect_bounds() {
    let mut c = cfg(SchemeId::Lkh, 2, 5, vec![leave(0, 1)]);
    c.random_events = Some(RandomEvents { count: 200, max_size: Some(9) });
    let events = c.expand_events().unwrap();
    assert_eq!(events.len(), 201);
    let mut members: BTreeSet<MemberId> = (1..=5).map(MemberId).collect();
    for e in &events {
        match e.op {
            Op::Join => assert!(members.insert(e.member)),
            Op::Leave => assert!(members.remove(&e.member)),
        }
        assert!((2..=9).contains(&members.len()) || e.tick == 0);
    }
    assert!(events.windows(2).all(|w| w[0].tick < w[1].tick));
}

#[test]
fn concrete_mode_sizes_payloads() {
    let mut c = cfg(SchemeId::Ofc, 2, 8, vec![leave(0, 8)]);
    c.crypto = CryptoMode::Concrete;
    c.key_length_bits = 100;
    let (report, _, _) = run_scenario(&c).unwrap();
    let e = &report.events[0];
    assert_eq!(e.bits, 300);
    assert_eq!(e.concrete_payload_bytes, Some(3 * 13));
}

#[test]
fn storage_predictions_track_simple_and_gkmp() {
    for scheme in [SchemeId::Simple, SchemeId::Gkmp] {
        let mut c = cfg(scheme, 2, 5, Vec::new());
        c.random_events = Some(RandomEvents { count: 30, max_size: Some(8) });
        let (report, _, _) = run_scenario(&c).unwrap();
        assert!(report.events.iter().all(|e| e.predicted.as_ref().and_then(|p| p.controller_keys_stored).is_some()));
        assert_eq!(report.mismatches().count(), 0, "{scheme}");
    }
}
