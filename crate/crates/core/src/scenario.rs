//! Scenario documents: TOML in, validated [`ScenarioConfig`] out.
//!
//! ```toml
//! name = "ring-f1"
//! seed = 7
//! f = 1
//!
//! [topology]
//! nodes = 6
//! edges = [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 0]]
//!
//! [[demands]]
//! src = 1
//! dst = 4
//! amount_bits = 500000
//!
//! [[byzantine]]
//! node = 0
//! behaviors = [{ kind = "equivocate-propose", views = [0] }]
//! ```
//!
//! Omitted fields take the defaults below.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::crypto::SecurityParams;
use crate::topology::{Edge, Graph, NodeId, TopologyError};

pub const DEFAULT_CAPACITY_BITS: u64 = 10_000_000;
pub const DEFAULT_CAP_BITS: u64 = 300_000;
pub const DEFAULT_VIEW_LIMIT: u64 = 6;
pub const DEFAULT_DELTA_SECONDS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Fault bound the protocol runs with.
    pub f: usize,
    #[serde(default = "default_delta")]
    pub delta_seconds: f64,
    /// Per-link, per-view delivery cap.
    #[serde(default = "default_cap")]
    pub cap_bits: u64,
    #[serde(default = "default_view_limit")]
    pub view_limit: u64,
    #[serde(default)]
    pub security: SecurityParams,
    pub topology: TopologySpec,
    #[serde(default)]
    pub demands: Vec<DemandSpec>,
    #[serde(default)]
    pub byzantine: Vec<ByzantineSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub nodes: usize,
    pub edges: Vec<[NodeId; 2]>,
    #[serde(default = "default_capacity")]
    pub capacity_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    pub src: NodeId,
    pub dst: NodeId,
    pub amount_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSpec {
    pub node: NodeId,
    #[serde(default)]
    pub behaviors: Vec<Behavior>,
}

/// Scripted deviations. Every Byzantine node also runs the honest logic;
/// a behavior rewrites or adds to what that logic sends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Behavior {
    /// As leader, send two proposals under one key, split across the others.
    EquivocatePropose {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        views: Option<Vec<u64>>,
    },
    /// Stay silent from the given frame slot on.
    Withhold {
        #[serde(default)]
        from_slot: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        views: Option<Vec<u64>>,
    },
    /// Hold every message back past the delay bound.
    DelayBeyondDelta {
        #[serde(default = "default_extra_delay")]
        extra_ticks: u64,
    },
    /// Record relayed key material; the relay rule already gives it away.
    Eavesdrop,
    /// Request keys to drain shared links.
    ResourceContention { dst: NodeId, amount_bits: u64 },
    /// As leader, slip an unrequested demand into the proposal.
    ForgedRequirement { dst: NodeId, amount_bits: u64 },
    /// As leader, route a plan over a link that does not exist.
    ForgedRoute,
    /// Flip a bit of the first key closure this node commits.
    TamperKc,
    /// Send votes and view changes claiming to be an honest node.
    ForgeTsAttempt,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA_SECONDS
}
fn default_cap() -> u64 {
    DEFAULT_CAP_BITS
}
fn default_view_limit() -> u64 {
    DEFAULT_VIEW_LIMIT
}
fn default_capacity() -> u64 {
    DEFAULT_CAPACITY_BITS
}
fn default_extra_delay() -> u64 {
    2
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Syntax(#[from] toml::de::Error),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("{0}")]
    Topology(#[from] TopologyError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which field a semantic check failed on, so it can be mapped to a line.
#[derive(Debug, Clone, Copy)]
enum Site {
    Root,
    Topology,
    Edge(usize),
    Demand(usize),
    Byzantine(usize),
}

#[derive(Deserialize)]
struct Spans {
    topology: Option<Spanned<TopologySpans>>,
    #[serde(default)]
    demands: Vec<Spanned<toml::Table>>,
    #[serde(default)]
    byzantine: Vec<Spanned<toml::Table>>,
}

#[derive(Deserialize)]
struct TopologySpans {
    #[serde(default)]
    edges: Vec<Spanned<toml::Value>>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn site_span(text: &str, site: Site) -> Option<Range<usize>> {
    let spans: Spans = toml::from_str(text).ok()?;
    match site {
        Site::Root => None,
        Site::Topology => spans.topology.map(|t| t.span()),
        Site::Edge(i) => spans.topology?.into_inner().edges.get(i).map(|e| e.span()),
        Site::Demand(i) => spans.demands.get(i).map(|d| d.span()),
        Site::Byzantine(i) => spans.byzantine.get(i).map(|b| b.span()),
    }
}

pub fn load_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let config: ScenarioConfig = toml::from_str(text)?;
    config.check().map_err(|(site, message)| ScenarioError::Invalid {
        line: site_span(text, site).map_or(1, |s| line_of(text, s.start)),
        message,
    })?;
    Ok(config)
}

pub fn load_scenario_file(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_scenario(&text)
}

pub fn render(config: &ScenarioConfig) -> String {
    toml::to_string(config).expect("scenario configs always serialize")
}

impl ScenarioConfig {
    pub fn graph(&self) -> Result<Graph, TopologyError> {
        Graph::new(
            self.topology.nodes,
            self.topology.edges.iter().map(|&[a, b]| (a, b)),
        )
    }

    pub fn byzantine_set(&self) -> BTreeSet<NodeId> {
        self.byzantine.iter().map(|b| b.node).collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.topology.edges.iter().map(|&[a, b]| Edge::new(a, b))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.check()
            .map_err(|(_, message)| ScenarioError::Invalid { line: 1, message })
    }

    fn check(&self) -> Result<(), (Site, String)> {
        let n = self.topology.nodes;
        let known = |id: NodeId, what: &str, site: Site| {
            if id < n {
                Ok(())
            } else {
                Err((site, format!("{what} {id} is not a node of the {n}-node graph")))
            }
        };
        if n == 0 {
            return Err((Site::Topology, "topology has no nodes".into()));
        }
        for (i, &[a, b]) in self.topology.edges.iter().enumerate() {
            known(a, "edge endpoint", Site::Edge(i))?;
            known(b, "edge endpoint", Site::Edge(i))?;
            if a == b {
                return Err((Site::Edge(i), format!("self-loop on node {a}")));
            }
        }
        self.graph().map_err(|e| (Site::Topology, e.to_string()))?;
        if self.topology.capacity_bits == 0 {
            return Err((Site::Topology, "capacity_bits must be positive".into()));
        }
        for (i, d) in self.demands.iter().enumerate() {
            known(d.src, "demand source", Site::Demand(i))?;
            known(d.dst, "demand destination", Site::Demand(i))?;
            if d.src == d.dst {
                return Err((Site::Demand(i), "demand source equals destination".into()));
            }
            if d.amount_bits == 0 {
                return Err((Site::Demand(i), "demand amount must be positive".into()));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, b) in self.byzantine.iter().enumerate() {
            known(b.node, "byzantine node", Site::Byzantine(i))?;
            if !seen.insert(b.node) {
                return Err((Site::Byzantine(i), format!("node {} listed twice", b.node)));
            }
            for beh in &b.behaviors {
                match beh {
                    Behavior::ResourceContention { dst, amount_bits }
                    | Behavior::ForgedRequirement { dst, amount_bits } => {
                        known(*dst, "behavior destination", Site::Byzantine(i))?;
                        if *dst == b.node || *amount_bits == 0 {
                            return Err((
                                Site::Byzantine(i),
                                "behavior demand needs another node and a positive amount".into(),
                            ));
                        }
                    }
                    Behavior::DelayBeyondDelta { extra_ticks } if *extra_ticks == 0 => {
                        return Err((Site::Byzantine(i), "extra_ticks must be positive".into()));
                    }
                    _ => {}
                }
            }
        }
        if !(self.delta_seconds > 0.0) {
            return Err((Site::Root, "delta_seconds must be positive".into()));
        }
        if self.view_limit == 0 {
            return Err((Site::Root, "view_limit must be positive".into()));
        }
        if self.cap_bits == 0 {
            return Err((Site::Root, "cap_bits must be positive".into()));
        }
        self.security
            .validate()
            .map_err(|e| (Site::Root, e.to_string()))?;
        Ok(())
    }
}
