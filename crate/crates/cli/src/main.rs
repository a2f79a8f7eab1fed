use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gkm_core::schemes::SchemeId;
use gkm_core::sim::{run_scenario, simulate, AuditReport, CostReport, ScenarioConfig, Trace};
use gkm_core::Error;
use serde::{Deserialize, Serialize};

mod compare;
mod render;

const REPORT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "gkm", version, about = "Group key management scheme simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario, write its cost and audit reports.
    Run(ScenarioArgs),
    /// Run a scenario and print only the secrecy verdicts.
    Audit(ScenarioArgs),
    /// Run a scenario and dump every rekey message.
    Trace(ScenarioArgs),
    /// Tabulate costs, storage and secrecy over a grid of schemes.
    Compare(compare::CompareArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Directory for report files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Leave timestamps out of every output.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario document (JSON).
    scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// A GKMP secrecy failure is expected and does not fail the run.
    #[arg(long)]
    expect_insecure: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Text,
    Structured,
}

/// Output of `run` and `audit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub scenario: ScenarioConfig,
    pub costs: CostReport,
    pub audit: AuditReport,
}

pub enum Failure {
    Usage(String),
    Insecure(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Insecure(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Insecure(m) | Failure::Invariant(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InternalInconsistency(_) => Failure::Invariant(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

pub fn timestamp(deterministic: bool) -> Option<u64> {
    if deterministic {
        return None;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| io_err(&path, e))
}

fn load(args: &ScenarioArgs) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(&args.scenario).map_err(|e| io_err(&args.scenario, e))?;
    let mut cfg: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", args.scenario.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Exit status for a finished audit.
fn verdict(cfg: &ScenarioConfig, audit: &AuditReport, expect_insecure: bool) -> Result<(), Failure> {
    if audit.passed() || (expect_insecure && cfg.scheme == SchemeId::Gkmp) {
        return Ok(());
    }
    let n = audit.failures().count();
    Err(Failure::Insecure(format!("secrecy audit failed: {n} verdict(s) FAIL")))
}

fn cmd_run(args: &ScenarioArgs, audit_only: bool) -> Result<(), Failure> {
    let cfg = load(args)?;
    let (costs, audit, _) = run_scenario(&cfg)?;
    let report = RunReport {
        version: REPORT_VERSION,
        generated_at: timestamp(args.common.deterministic),
        scenario: cfg.clone(),
        costs,
        audit,
    };
    let text = if audit_only { render::audit_text(&report) } else { render::run_text(&report) };
    if let Some(dir) = &args.common.out_dir {
        if audit_only {
            write_file(dir, "audit_report.json", &to_json(&report.audit))?;
            write_file(dir, "audit_report.txt", &text)?;
        } else {
            write_file(dir, "cost_report.json", &to_json(&report.costs))?;
            write_file(dir, "audit_report.json", &to_json(&report.audit))?;
            write_file(dir, "report.json", &to_json(&report))?;
            write_file(dir, "report.txt", &text)?;
        }
    }
    match args.common.format {
        Format::Text => print!("{text}"),
        Format::Structured if audit_only => print!("{}", to_json(&report.audit)),
        Format::Structured => print!("{}", to_json(&report)),
    }
    verdict(&cfg, &report.audit, args.expect_insecure)
}

fn cmd_trace(args: &ScenarioArgs) -> Result<(), Failure> {
    let cfg = load(args)?;
    let (_, trace): (CostReport, Trace) = simulate(&cfg)?;
    let text = render::trace_text(&trace);
    if let Some(dir) = &args.common.out_dir {
        write_file(dir, "trace.json", &to_json(&trace))?;
        write_file(dir, "trace.txt", &text)?;
    }
    match args.common.format {
        Format::Text => print!("{text}"),
        Format::Structured => print!("{}", to_json(&trace)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args, false),
        Command::Audit(args) => cmd_run(args, true),
        Command::Trace(args) => cmd_trace(args),
        Command::Compare(args) => compare::cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gkm: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
