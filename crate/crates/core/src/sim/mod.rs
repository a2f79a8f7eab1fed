//! Scenario runner, cost predictions and the secrecy auditor.

pub mod audit;
pub mod closure;
pub mod predict;
pub mod scenario;

pub use audit::{audit_secrecy, AuditReport, Property, Verdict};
pub use closure::{attacker_closure, AttackerView, ClosureIndex};
pub use predict::{optimize_cluster_size, predict_costs, ClusterChoice, EventPrediction, Prediction};
pub use scenario::{
    run_scenario, simulate, BatchMode, CostReport, EventCost, EventSpec, RandomEvents, ScenarioConfig, Trace,
    TraceEvent, TraceMessage,
};

#[cfg(test)]
mod tests;
