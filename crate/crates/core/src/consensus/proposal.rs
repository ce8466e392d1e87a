//! Key-distribution proposals: the leader's plan and every replica's
//! independent legitimacy check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::Bits;
use crate::crypto::{digest64, Encoder, SeedSchedule};
use crate::topology::{
    disjoint_paths_avoiding, local_connectivity, path_links, Edge, Graph, NodeId, PathSet,
    PathSetViolation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DemandId(pub usize);

/// A registered end-to-end key request, or the slice of one served in a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demand {
    pub id: DemandId,
    pub src: NodeId,
    pub dst: NodeId,
    pub amount_bits: u64,
}

/// Registered demands and what is still owed on each.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DemandBook {
    entries: Vec<(Demand, u64)>,
}

impl DemandBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, src: NodeId, dst: NodeId, amount_bits: u64) -> DemandId {
        let id = DemandId(self.entries.len());
        self.entries.push((
            Demand {
                id,
                src,
                dst,
                amount_bits,
            },
            amount_bits,
        ));
        id
    }

    pub fn get(&self, id: DemandId) -> Option<&Demand> {
        self.entries.get(id.0).map(|(d, _)| d)
    }

    pub fn remaining(&self, id: DemandId) -> u64 {
        self.entries.get(id.0).map_or(0, |(_, r)| *r)
    }

    pub fn demands(&self) -> impl Iterator<Item = &Demand> {
        self.entries.iter().map(|(d, _)| d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record_served(&mut self, id: DemandId, bits: u64) {
        if let Some((_, r)) = self.entries.get_mut(id.0) {
            *r = r.saturating_sub(bits);
        }
    }

    /// A demand whose pair has no more than `f` disjoint paths can never
    /// be served.
    pub fn is_feasible(&self, id: DemandId, g: &Graph, f: usize) -> bool {
        self.get(id).is_some_and(|d| {
            local_connectivity(g, d.src, d.dst).is_ok_and(|beta| beta > f)
        })
    }

    /// Nothing left that any future view could serve.
    pub fn is_settled(&self, g: &Graph, f: usize) -> bool {
        self.entries
            .iter()
            .all(|(d, r)| *r == 0 || !self.is_feasible(d.id, g, f))
    }
}

/// Routing for one demand: disjoint paths and the bits sent on each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub demand: DemandId,
    pub paths: PathSet,
    pub amounts: Vec<u64>,
}

impl Plan {
    pub fn per_path_bits(&self) -> u64 {
        self.amounts.first().copied().unwrap_or(0)
    }

    pub fn total_bits(&self) -> u64 {
        self.amounts.iter().sum()
    }

    /// Link bits this plan consumes: amount times hop count, per path.
    pub fn delivery_bits(&self) -> u64 {
        self.paths
            .paths
            .iter()
            .zip(&self.amounts)
            .map(|(p, a)| a * (p.len() as u64 - 1))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub view: u64,
    pub demands: Vec<Demand>,
    pub plans: Vec<Plan>,
}

impl Proposal {
    pub fn empty(view: u64) -> Self {
        Self {
            view,
            demands: Vec::new(),
            plans: Vec::new(),
        }
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.view).usize(self.demands.len());
        for d in &self.demands {
            enc.usize(d.id.0).usize(d.src).usize(d.dst).u64(d.amount_bits);
        }
        enc.usize(self.plans.len());
        for p in &self.plans {
            enc.usize(p.demand.0)
                .usize(p.paths.source)
                .usize(p.paths.target)
                .usize(p.paths.paths.len());
            for (path, amount) in p.paths.paths.iter().zip(&p.amounts) {
                enc.usize(path.len());
                for &n in path {
                    enc.usize(n);
                }
                enc.u64(*amount);
            }
            enc.usize(p.amounts.len());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    /// Constant-size tally key: 64-bit PA hash of the canonical encoding.
    pub fn digest(&self, seeds: &SeedSchedule) -> ProposalDigest {
        ProposalDigest(digest64(&Bits::from_all_bytes(&self.to_bytes()), seeds.digest()))
    }

    pub fn delivery_bits(&self) -> u64 {
        self.plans.iter().map(Plan::delivery_bits).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProposalDigest(pub u64);

/// Per-view limits a proposal must respect.
pub struct Budget<'a> {
    /// Bits any one link may carry in a single view.
    pub cap_bits: u64,
    /// Unconsumed bits in each link pool.
    pub pool_available: &'a dyn Fn(Edge) -> u64,
}

impl Budget<'_> {
    fn headroom(&self, e: Edge, used: u64) -> u64 {
        self.cap_bits
            .saturating_sub(used)
            .min((self.pool_available)(e).saturating_sub(used))
    }
}

/// Leader-side plan: for each outstanding demand in registration order,
/// the lexicographically smallest maximum disjoint path set over links
/// that still have headroom, an equal split of the remainder capped by
/// the tightest link, and nothing at all when `f` or fewer paths remain.
pub fn build_proposal(
    view: u64,
    book: &DemandBook,
    g: &Graph,
    f: usize,
    budget: &Budget<'_>,
) -> Proposal {
    let mut used: BTreeMap<Edge, u64> = BTreeMap::new();
    let mut proposal = Proposal::empty(view);
    for d in book.demands() {
        let remaining = book.remaining(d.id);
        if remaining == 0 || !book.is_feasible(d.id, g, f) {
            continue;
        }
        let saturated: BTreeSet<Edge> = g
            .edges()
            .iter()
            .copied()
            .filter(|&e| budget.headroom(e, used.get(&e).copied().unwrap_or(0)) == 0)
            .collect();
        let residual = g.without_edges(&saturated);
        let paths = disjoint_paths_avoiding(&residual, d.src, d.dst, &BTreeSet::new());
        let beta = paths.len();
        if beta <= f {
            continue;
        }
        let tightest = paths
            .paths
            .iter()
            .flat_map(|p| path_links(p))
            .map(|e| budget.headroom(e, used.get(&e).copied().unwrap_or(0)))
            .min()
            .unwrap_or(0);
        let per_path = remaining.div_ceil(beta as u64).min(tightest);
        if per_path == 0 {
            continue;
        }
        for p in &paths.paths {
            for e in path_links(p) {
                *used.entry(e).or_default() += per_path;
            }
        }
        proposal.demands.push(Demand {
            amount_bits: per_path * beta as u64,
            ..*d
        });
        proposal.plans.push(Plan {
            demand: d.id,
            paths,
            amounts: vec![per_path; beta],
        });
    }
    proposal
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalDefect {
    #[error("proposal is for another view")]
    WrongView,
    #[error("a demand is not registered, already served, repeated or mismatched")]
    UnknownDemand,
    #[error("a route uses a link or endpoint outside the topology")]
    InvalidRoute,
    #[error("routes share an internal node")]
    NotDisjoint,
    #[error("a demand is split over f or fewer paths")]
    TooFewPaths,
    #[error("per-path amounts differ")]
    UnequalAmounts,
    #[error("link usage exceeds the per-view cap or the pool balance")]
    OverBudget,
}

/// Re-derives every legitimacy condition without trusting the leader.
pub fn validate_proposal(
    p: &Proposal,
    view: u64,
    book: &DemandBook,
    g: &Graph,
    f: usize,
    budget: &Budget<'_>,
) -> Result<(), ProposalDefect> {
    if p.view != view {
        return Err(ProposalDefect::WrongView);
    }
    if p.demands.len() != p.plans.len() {
        return Err(ProposalDefect::UnknownDemand);
    }
    let mut seen = BTreeSet::new();
    let mut used: BTreeMap<Edge, u64> = BTreeMap::new();
    for (d, plan) in p.demands.iter().zip(&p.plans) {
        let Some(reg) = book.get(plan.demand) else {
            return Err(ProposalDefect::UnknownDemand);
        };
        let remaining = book.remaining(plan.demand);
        if d.id != plan.demand
            || (d.src, d.dst) != (reg.src, reg.dst)
            || (plan.paths.source, plan.paths.target) != (reg.src, reg.dst)
            || remaining == 0
            || !seen.insert(plan.demand)
        {
            return Err(ProposalDefect::UnknownDemand);
        }
        plan.paths.check(g).map_err(|v| match v {
            PathSetViolation::BadEndpoints(_) | PathSetViolation::MissingEdge(_) => {
                ProposalDefect::InvalidRoute
            }
            PathSetViolation::RepeatedNode(_) | PathSetViolation::SharedInternal(_) => {
                ProposalDefect::NotDisjoint
            }
        })?;
        let beta = plan.paths.len();
        if beta <= f {
            return Err(ProposalDefect::TooFewPaths);
        }
        let per_path = plan.per_path_bits();
        if plan.amounts.len() != beta
            || per_path == 0
            || plan.amounts.iter().any(|&a| a != per_path)
            || d.amount_bits != plan.total_bits()
        {
            return Err(ProposalDefect::UnequalAmounts);
        }
        if per_path > remaining.div_ceil(beta as u64) {
            return Err(ProposalDefect::OverBudget);
        }
        for path in &plan.paths.paths {
            for e in path_links(path) {
                *used.entry(e).or_default() += per_path;
            }
        }
    }
    if used
        .iter()
        .any(|(&e, &u)| u > budget.cap_bits || u > (budget.pool_available)(e))
    {
        return Err(ProposalDefect::OverBudget);
    }
    Ok(())
}
