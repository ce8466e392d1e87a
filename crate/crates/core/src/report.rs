//! Run reports, the summary table and seeded batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{DemandId, ProposalDigest};
use crate::scenario::ScenarioConfig;
use crate::simnet::{run_scenario, SimError};
use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandReport {
    pub demand: DemandId,
    pub src: NodeId,
    pub dst: NodeId,
    pub amount_bits: u64,
    pub served_bits: u64,
    pub leaked_bits: u64,
    /// Share of the delivered pre-amplification key the adversary saw;
    /// 100 when nothing was delivered.
    pub eavesdrop_percent: f64,
    pub final_key_bits: u64,
    pub views: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub demand: DemandId,
    pub per_path_bits: u64,
    pub hops: Vec<usize>,
    pub routes: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommittedView {
    pub view: u64,
    pub digest: ProposalDigest,
    pub plans: Vec<PlanSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view: u64,
    pub leader: NodeId,
    pub started_at: u64,
    pub committed: Option<ProposalDigest>,
    pub honest_view_changes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violations {
    /// Two honest nodes committed different proposals in one view.
    pub safety: bool,
    /// An honest node stayed in a view past its timer.
    pub liveness: bool,
    /// Honest endpoints of a served demand hold different key segments.
    pub key_mismatch: bool,
    /// Tagged consumption does not add up to what the pools lost.
    pub ledger: bool,
    /// An honest signing key authenticated two different messages.
    pub key_reuse: bool,
    /// A message with a forged source passed verification.
    pub forgery_accepted: bool,
}

impl Violations {
    pub fn any(&self) -> bool {
        self.safety
            || self.liveness
            || self.key_mismatch
            || self.ledger
            || self.key_reuse
            || self.forgery_accepted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub seed: u64,
    pub f: usize,
    pub nodes: usize,
    pub connectivity: usize,
    pub consensus_bits: u64,
    pub delivery_bits: u64,
    pub total_bits: u64,
    /// Worst case over the scenario's own demands.
    pub eavesdrop_percent: f64,
    pub demands: Vec<DemandReport>,
    /// Simulated seconds until every feasible demand was served; `None`
    /// when nothing could be served.
    pub time_seconds: Option<f64>,
    pub ticks: u64,
    pub views_executed: u64,
    pub committed: Vec<CommittedView>,
    /// Views only faulty nodes committed. Their delivery draws still burn
    /// key on links they share with honest nodes.
    pub faulty_only_commits: Vec<CommittedView>,
    pub view_log: Vec<ViewRecord>,
    /// Signing keys drawn per node.
    pub ts_key_draws: BTreeMap<NodeId, u64>,
    pub evidence: usize,
    pub rejected_messages: usize,
    pub violations: Violations,
}

impl MetricsReport {
    pub fn consensus_kb(&self) -> f64 {
        self.consensus_bits as f64 / 1000.0
    }

    pub fn delivery_kb(&self) -> f64 {
        self.delivery_bits as f64 / 1000.0
    }

    pub fn total_kb(&self) -> f64 {
        self.total_bits as f64 / 1000.0
    }
}

pub const TABLE_HEADER: &str = "topology,f,total_kb,consensus_kb,delivery_kb,eavesdrop_pct,time_s";

/// One summary row; "-" marks runs that delivered nothing.
pub fn table_row(r: &MetricsReport) -> String {
    let served = r.demands.iter().any(|d| d.served_bits > 0);
    let kb = |v: f64| if served { format!("{v:.3}") } else { "-".into() };
    format!(
        "{},{},{},{},{},{:.2}%,{}",
        r.name,
        r.f,
        kb(r.total_kb()),
        kb(r.consensus_kb()),
        kb(r.delivery_kb()),
        r.eavesdrop_percent,
        r.time_seconds.map_or("-".into(), |t| format!("{t}")),
    )
}

pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    writeln!(s, "{TABLE_HEADER}").unwrap();
    for r in reports {
        writeln!(s, "{}", table_row(r)).unwrap();
    }
    s
}

/// Machine-readable stream: one JSON object per report.
pub fn json_lines(reports: &[MetricsReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
        .collect()
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<(String, u64, SimError)>,
}

impl BatchOutcome {
    pub fn table(&self) -> String {
        summary_table(&self.reports)
    }
}

/// Runs every config under every seed in parallel. Each run is isolated
/// and deterministic, so the output order and bytes depend only on the
/// inputs.
pub fn run_batch(configs: &[ScenarioConfig], seeds: &[u64]) -> BatchOutcome {
    let jobs: Vec<ScenarioConfig> = configs
        .iter()
        .flat_map(|c| {
            let base = if seeds.is_empty() { vec![c.seed] } else { seeds.to_vec() };
            base.into_iter().map(move |seed| ScenarioConfig {
                seed,
                ..c.clone()
            })
        })
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|c| (c.name.clone(), c.seed, run_scenario(c)))
        .collect();
    let mut outcome = BatchOutcome {
        reports: Vec::new(),
        failures: Vec::new(),
    };
    for (name, seed, r) in results {
        match r {
            Ok(report) => outcome.reports.push(report),
            Err(e) => outcome.failures.push((name, seed, e)),
        }
    }
    outcome
}
