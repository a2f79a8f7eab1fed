//! Human-readable reports.

use std::fmt::Write;

use gkm_core::keytree::NodeId;
use gkm_core::schemes::Delivery;
use gkm_core::sim::{AuditReport, Trace};

use crate::RunReport;

fn opt(v: Option<u64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

fn node(label: &str, id: NodeId) -> String {
    format!("{label} (#{id})")
}

pub fn run_text(r: &RunReport) -> String {
    let c = &r.costs;
    let mut s = String::new();
    writeln!(s, "gkm run report v{}", r.version).unwrap();
    if let Some(t) = r.generated_at {
        writeln!(s, "generated at {t} (unix seconds)").unwrap();
    }
    writeln!(s, "scheme {}  members {}  seed {}  key length {} bits", c.scheme, c.initial_size, r.scenario.seed, c.key_length_bits)
        .unwrap();
    let init = c.initial_predicted.as_ref();
    writeln!(
        s,
        "initial storage: controller {} (predicted {}), member max {} (predicted {})",
        c.initial_controller_keys,
        opt(init.and_then(|p| p.controller_keys_stored)),
        c.initial_max_member_keys,
        opt(init.and_then(|p| p.max_member_keys_stored)),
    )
    .unwrap();
    writeln!(s).unwrap();
    writeln!(
        s,
        "{:>5} {:>6} {:>5} {:>5} | {:>7} {:>9} {:>8} {:>8} {:>8} | {:>10} {:>10} | {:>9} {:>9} {:>9}",
        "event", "tick", "join", "leave", "unicast", "multicast", "messages", "keys", "bits", "ctrl keys", "member max", "pred msgs",
        "pred keys", "pred ctrl"
    )
    .unwrap();
    for e in &c.events {
        let p = e.predicted.as_ref();
        writeln!(
            s,
            "{:>5} {:>6} {:>5} {:>5} | {:>7} {:>9} {:>8} {:>8} {:>8} | {:>10} {:>10} | {:>9} {:>9} {:>9}",
            e.index,
            e.tick,
            e.joins,
            e.leaves,
            e.unicast_count,
            e.multicast_count,
            e.messages,
            e.payload_keys,
            e.bits,
            e.controller_keys_stored,
            e.max_member_keys_stored,
            opt(p.and_then(|p| p.messages)),
            opt(p.and_then(|p| p.payload_keys)),
            opt(p.and_then(|p| p.controller_keys_stored)),
        )
        .unwrap();
    }
    let t = &c.totals;
    writeln!(
        s,
        "total: {} messages ({} unicast, {} multicast), {} payload keys, {} bits",
        t.messages, t.unicast_count, t.multicast_count, t.payload_keys, t.bits
    )
    .unwrap();
    let mismatches = c.mismatches().count();
    if mismatches > 0 {
        writeln!(s, "WARNING: {mismatches} event(s) differ from the closed-form prediction").unwrap();
    }
    writeln!(s).unwrap();
    s.push_str(&audit_body(&r.audit));
    s
}

pub fn audit_text(r: &RunReport) -> String {
    let mut s = String::new();
    writeln!(s, "gkm audit report v{}", r.version).unwrap();
    if let Some(t) = r.generated_at {
        writeln!(s, "generated at {t} (unix seconds)").unwrap();
    }
    writeln!(s, "scheme {}  seed {}", r.costs.scheme, r.scenario.seed).unwrap();
    s.push_str(&audit_body(&r.audit));
    s
}

fn audit_body(a: &AuditReport) -> String {
    let mut s = String::new();
    let fails = a.failures().count();
    writeln!(s, "secrecy audit: {} verdicts, {} FAIL -> {}", a.verdicts.len(), fails, if fails == 0 { "pass" } else { "FAIL" })
        .unwrap();
    for v in &a.verdicts {
        let status = if v.pass { "pass" } else { "FAIL" };
        writeln!(s, "  event {:>4} {:<4} {:<8} secrecy {status} ({} group keys checked)", v.event, v.member, v.property, v.checked)
            .unwrap();
        if let Some(w) = &v.witness {
            writeln!(s, "    witness {w}").unwrap();
            for step in &v.derivation {
                writeln!(s, "      {step}").unwrap();
            }
        }
    }
    s
}

pub fn trace_text(t: &Trace) -> String {
    let mut s = String::new();
    writeln!(s, "gkm trace v{}  scheme {}", t.version, t.scheme).unwrap();
    writeln!(s, "initial group key {}", t.initial_group_key).unwrap();
    for e in &t.events {
        let names = |ms: &[gkm_core::MemberId]| ms.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        writeln!(s).unwrap();
        writeln!(s, "event {} tick {}  join [{}]  leave [{}]", e.index, e.tick, names(&e.joins), names(&e.leaves)).unwrap();
        for m in &e.messages {
            let kind = match m.kind {
                Delivery::Unicast => "unicast",
                Delivery::Multicast => "multicast",
            };
            let enc = match (&m.enc_label, m.enc_node) {
                (Some(l), Some(n)) => node(l, n),
                _ => "(key outside the tree)".to_string(),
            };
            write!(
                s,
                "  #{:<4} {:<9} {{{}}} under {} = {}  for {}  to [{}]",
                m.seq,
                kind,
                m.payload.join(", "),
                enc,
                m.ciphertext.enc_key,
                node(&m.target_label, m.target_node),
                names(&m.recipients),
            )
            .unwrap();
            if let Some(p) = m.new_position {
                write!(s, "  moves to #{p}").unwrap();
            }
            writeln!(s).unwrap();
        }
        writeln!(s, "  group key now {}", e.group_key).unwrap();
    }
    s
}
