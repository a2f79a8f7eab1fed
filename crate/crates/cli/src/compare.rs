//! `gkm compare`: one row per (scheme, degree, size) cell.

use std::fmt::Write;

use clap::Args;
use gkm_core::batch::Op;
use gkm_core::schemes::SchemeId;
use gkm_core::sim::{run_scenario, EventSpec, Property, RandomEvents, ScenarioConfig};
use gkm_core::MemberId;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{timestamp, to_json, write_file, Common, Failure, Format, REPORT_VERSION};

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Comma-separated scheme names.
    #[arg(long, value_delimiter = ',', required = true)]
    schemes: Vec<String>,
    /// Tree degrees (the hybrid arity); ignored by the flat schemes.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    degrees: Vec<usize>,
    /// Group sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<u32>,
    /// Hybrid cluster size.
    #[arg(long, default_value_t = 3)]
    cluster_size: usize,
    /// Random events per secrecy run.
    #[arg(long, default_value_t = 40)]
    events: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_size: Option<usize>,
    pub n: u32,
    pub leave_messages: u64,
    pub leave_payload_keys: u64,
    pub join_unicast: u64,
    pub join_multicast: u64,
    pub join_payload_keys: u64,
    pub controller_storage: u64,
    pub member_storage: u64,
    pub forward_secrecy: bool,
    pub backward_secrecy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareReport {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub seed: u64,
    pub events_per_run: usize,
    pub rows: Vec<CompareRow>,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    scheme: SchemeId,
    degree: Option<usize>,
    n: u32,
}

fn grid(args: &CompareArgs) -> Result<Vec<Cell>, Failure> {
    let mut schemes = Vec::new();
    for s in &args.schemes {
        schemes.push(s.parse::<SchemeId>().map_err(|e| Failure::Usage(e.to_string()))?);
    }
    if args.sizes.contains(&0) || args.degrees.iter().any(|k| *k < 2) {
        return Err(Failure::Usage("sizes must be positive and degrees at least 2".into()));
    }
    let mut cells = Vec::new();
    for &scheme in &schemes {
        let degrees: Vec<Option<usize>> = match scheme {
            SchemeId::Simple | SchemeId::Gkmp => vec![None],
            SchemeId::Ofc => args.degrees.contains(&2).then_some(Some(2)).into_iter().collect(),
            _ => args.degrees.iter().map(|k| Some(*k)).collect(),
        };
        for degree in degrees {
            for &n in &args.sizes {
                cells.push(Cell { scheme, degree, n });
            }
        }
    }
    if cells.is_empty() {
        return Err(Failure::Usage("the grid has no valid cells".into()));
    }
    Ok(cells)
}

fn base(cell: Cell, args: &CompareArgs) -> ScenarioConfig {
    ScenarioConfig {
        degree: cell.degree.unwrap_or(2),
        cluster_size: (cell.scheme == SchemeId::Hybrid).then_some(args.cluster_size),
        ..ScenarioConfig::new(cell.scheme, cell.n, args.seed)
    }
}

fn row(cell: Cell, args: &CompareArgs) -> Result<CompareRow, Failure> {
    // member 1 leaves and comes back
    let mut cost_cfg = base(cell, args);
    if cell.n < 2 {
        return Err(Failure::Usage(format!("{} with N={}: need at least two members", cell.scheme, cell.n)));
    }
    cost_cfg.events = vec![
        EventSpec { tick: 0, op: Op::Leave, member: MemberId(1) },
        EventSpec { tick: 1, op: Op::Join, member: MemberId(1) },
    ];
    let (costs, _, _) = run_scenario(&cost_cfg)?;
    let mut audit_cfg = base(cell, args);
    audit_cfg.random_events = Some(RandomEvents { count: args.events, max_size: None });
    let (_, audit, _) = run_scenario(&audit_cfg)?;
    let (leave, join) = (&costs.events[0], &costs.events[1]);
    let forward_secrecy = audit.of(Property::Forward).all(|v| v.pass);
    let backward_secrecy = audit.of(Property::Backward).all(|v| v.pass);
    Ok(CompareRow {
        scheme: cell.scheme.name().to_string(),
        degree: cell.degree,
        cluster_size: cost_cfg.cluster_size,
        n: cell.n,
        leave_messages: leave.messages,
        leave_payload_keys: leave.payload_keys,
        join_unicast: join.unicast_count,
        join_multicast: join.multicast_count,
        join_payload_keys: join.payload_keys,
        controller_storage: costs.initial_controller_keys,
        member_storage: costs.initial_max_member_keys,
        forward_secrecy,
        backward_secrecy,
    })
}

const HEADER: [&str; 13] = [
    "scheme",
    "k",
    "M",
    "N",
    "leave_msgs",
    "leave_keys",
    "join_unicast",
    "join_multicast",
    "join_keys",
    "ctrl_storage",
    "member_storage",
    "forward",
    "backward",
];

pub fn table_text(rows: &[CompareRow]) -> String {
    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    let dash = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut s = HEADER.join(",");
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scheme,
            dash(r.degree),
            dash(r.cluster_size),
            r.n,
            r.leave_messages,
            r.leave_payload_keys,
            r.join_unicast,
            r.join_multicast,
            r.join_payload_keys,
            r.controller_storage,
            r.member_storage,
            verdict(r.forward_secrecy),
            verdict(r.backward_secrecy),
        )
        .unwrap();
    }
    s
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(), Failure> {
    let cells = grid(args)?;
    let rows = cells.par_iter().map(|c| row(*c, args)).collect::<Result<Vec<_>, _>>()?;
    let report = CompareReport {
        version: REPORT_VERSION,
        generated_at: timestamp(args.common.deterministic),
        seed: args.seed,
        events_per_run: args.events,
        rows,
    };
    let text = table_text(&report.rows);
    if let Some(dir) = &args.common.out_dir {
        write_file(dir, "compare.csv", &text)?;
        write_file(dir, "compare.json", &to_json(&report))?;
    }
    match args.common.format {
        Format::Text => print!("{text}"),
        Format::Structured => print!("{}", to_json(&report)),
    }
    Ok(())
}
