//! The simulated network: link pools, per-node replicas, a delivery queue
//! in Δ ticks and a ledger only the simulator can write.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::adversary::{adversary_act, AdversaryCtx, Outbound, Recipients};
use crate::consensus::{
    DemandBook, DemandId, EndpointOutput, EnvError, NodeEnv, Payload, Proposal, ProposalDigest,
    ProtocolMessage, Replica, ReplicaConfig, ReplicaEvent, StepOutput, FRAME_SLOTS, TIMER_SLOTS,
};
use crate::crypto::{ts_keygen, ts_share_bits, KeyRef, SecurityParams, SeedSchedule, TsKey};
use crate::keydist::{final_key_len, EndpointRole, LeakedFraction, PathId};
use crate::keystore::{KeyBlock, KeyStore, KeyStoreError, Purpose};
use crate::report::{
    CommittedView, DemandReport, MetricsReport, PlanSummary, ViewRecord, Violations,
};
use crate::scenario::{Behavior, ScenarioConfig, ScenarioError};
use crate::time::Tick;
use crate::topology::{node_connectivity, Edge, Graph, NodeId, TopologyError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Key(#[from] KeyStoreError),
}

/// Hardware shared by all nodes: link pools, cached signing keys and the
/// delivery blocks already handed out.
pub struct SimEnv {
    graph: Arc<Graph>,
    f: usize,
    params: SecurityParams,
    seeds: SeedSchedule,
    store: KeyStore,
    keys: BTreeMap<KeyRef, TsKey>,
    blocks: BTreeMap<(u64, PathId, Edge), KeyBlock>,
    snapshots: RefCell<BTreeMap<u64, BTreeMap<Edge, u64>>>,
    draws: BTreeMap<NodeId, u64>,
}

impl SimEnv {
    pub fn store(&self) -> &KeyStore {
        &self.store
    }

    /// Signing key `key_ref` if it was ever drawn.
    pub fn key(&self, key_ref: &KeyRef) -> Option<&TsKey> {
        self.keys.get(key_ref)
    }
}

impl NodeEnv for SimEnv {
    fn ts_key(&mut self, node: NodeId, view: u64, step_index: u8) -> Result<TsKey, EnvError> {
        let key_ref = KeyRef {
            owner: node,
            view,
            step_index,
        };
        if let Some(k) = self.keys.get(&key_ref) {
            return Ok(k.clone());
        }
        let edges: Vec<Edge> = self
            .graph
            .neighbors(node)
            .iter()
            .map(|&nb| Edge::new(node, nb))
            .collect();
        let share = ts_share_bits(edges.len(), self.f, self.params.ts_key_len_bits);
        let blocks = self.store.consume_all(&edges, share as u64, Purpose::Consensus)?;
        let key = ts_keygen(
            node,
            view,
            step_index,
            &blocks,
            self.f,
            &self.params,
            self.seeds.ts_key(view, step_index, node),
        )?;
        *self.draws.entry(node).or_default() += 1;
        self.keys.insert(key_ref, key.clone());
        Ok(key)
    }

    fn delivery_block(
        &mut self,
        node: NodeId,
        view: u64,
        path: PathId,
        edge: Edge,
        len: u64,
    ) -> Result<KeyBlock, EnvError> {
        if !edge.touches(node) {
            return Err(EnvError::NotIncident(edge, node));
        }
        if let Some(b) = self.blocks.get(&(view, path, edge)) {
            return Ok(b.clone());
        }
        let b = self.store.consume(edge, len, Purpose::Delivery)?;
        self.blocks.insert((view, path, edge), b.clone());
        Ok(b)
    }

    fn pool_available(&self, edge: Edge, view: u64) -> u64 {
        let mut snaps = self.snapshots.borrow_mut();
        let snap = snaps.entry(view).or_insert_with(|| {
            self.store
                .pools()
                .map(|p| (p.edge(), p.available_bits()))
                .collect()
        });
        snap.get(&edge).copied().unwrap_or(0)
    }
}

struct Delivery {
    recipient: NodeId,
    sender: NodeId,
    msg: ProtocolMessage,
}

/// Ground truth gathered from honest nodes; never read by replicas.
#[derive(Debug, Default)]
pub struct OmniscientLedger {
    pub commits: BTreeMap<u64, BTreeMap<NodeId, ProposalDigest>>,
    pub proposals: BTreeMap<u64, Proposal>,
    /// Proposals committed by faulty nodes, whose own delivery draws burn
    /// key on their links even when no honest node commits.
    pub faulty_commits: BTreeMap<u64, Proposal>,
    pub served: BTreeSet<(u64, DemandId)>,
    pub outputs: BTreeMap<(u64, DemandId, EndpointRole), EndpointOutput>,
    pub evidence: Vec<(NodeId, ReplicaEvent)>,
    pub views: BTreeMap<u64, ViewRecord>,
    pub rejected: usize,
    pub forged_accepted: bool,
    pub stalled: bool,
    /// Distinct signed byte strings per honest key.
    pub signed: BTreeMap<KeyRef, BTreeSet<Vec<u8>>>,
}

pub struct World {
    cfg: ScenarioConfig,
    graph: Arc<Graph>,
    env: SimEnv,
    replicas: Vec<Replica>,
    honest: Vec<NodeId>,
    scripts: BTreeMap<NodeId, Vec<Behavior>>,
    demands: Vec<DemandId>,
    queue: BTreeMap<Tick, Vec<Delivery>>,
    now: Tick,
    rng: ChaCha8Rng,
    ledger: OmniscientLedger,
    trace: Option<Vec<String>>,
}

impl World {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let graph = Arc::new(cfg.graph()?);
        let seeds = SeedSchedule::new(cfg.seed);
        let mut store = KeyStore::new();
        for e in graph.edges() {
            store.provision(*e, cfg.topology.capacity_bits, seeds.link_stream(e.0, e.1))?;
        }
        let mut book = DemandBook::new();
        let demands = cfg
            .demands
            .iter()
            .map(|d| book.register(d.src, d.dst, d.amount_bits))
            .collect();
        for b in &cfg.byzantine {
            for beh in &b.behaviors {
                if let Behavior::ResourceContention { dst, amount_bits } = beh {
                    book.register(b.node, *dst, *amount_bits);
                }
            }
        }
        let rcfg = ReplicaConfig {
            graph: graph.clone(),
            f: cfg.f,
            params: cfg.security,
            seeds,
            cap_bits: cfg.cap_bits,
            delta: 1,
        };
        let n = graph.node_count();
        let replicas = (0..n)
            .map(|id| Replica::new(id, rcfg.clone(), book.clone()))
            .collect();
        let scripts: BTreeMap<NodeId, Vec<Behavior>> = cfg
            .byzantine
            .iter()
            .map(|b| (b.node, b.behaviors.clone()))
            .collect();
        let honest = (0..n).filter(|i| !scripts.contains_key(i)).collect();
        let mut ledger = OmniscientLedger::default();
        ledger.views.insert(
            0,
            ViewRecord {
                view: 0,
                leader: 0,
                started_at: 0,
                committed: None,
                honest_view_changes: 0,
            },
        );
        Ok(Self {
            cfg: cfg.clone(),
            env: SimEnv {
                graph: graph.clone(),
                f: cfg.f,
                params: cfg.security,
                seeds,
                store,
                keys: BTreeMap::new(),
                blocks: BTreeMap::new(),
                snapshots: RefCell::new(BTreeMap::new()),
                draws: BTreeMap::new(),
            },
            graph,
            replicas,
            honest,
            scripts,
            demands,
            queue: BTreeMap::new(),
            now: Tick::ZERO,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_AD7E_5A4E),
            ledger,
            trace: None,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn env(&self) -> &SimEnv {
        &self.env
    }

    pub fn ledger(&self) -> &OmniscientLedger {
        &self.ledger
    }

    pub fn trace(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn is_byzantine(&self, n: NodeId) -> bool {
        self.scripts.contains_key(&n)
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if let Some(t) = self.trace.as_mut() {
            t.push(line());
        }
    }

    /// Delivers what is due now, runs every node's slot in id order and
    /// queues what they send.
    pub fn advance_slot(&mut self) {
        let now = self.now;
        let n = self.replicas.len();
        let mut outs: Vec<StepOutput> = (0..n).map(|_| StepOutput::default()).collect();
        for d in self.queue.remove(&now).unwrap_or_default() {
            self.replicas[d.recipient].handle_message(d.msg, d.sender, now, &mut outs[d.recipient]);
        }
        for (id, out) in outs.iter_mut().enumerate() {
            self.replicas[id].step(now, &mut self.env, out);
            if !self.is_byzantine(id) && now > self.replicas[id].view_start() + TIMER_SLOTS {
                self.ledger.stalled = true;
            }
        }
        for (id, out) in outs.into_iter().enumerate() {
            for ev in out.events {
                self.log(|| format!("{now} node={id} {}", serde_json::to_string(&ev).unwrap()));
                if !self.is_byzantine(id) {
                    self.record(id, ev);
                } else if let ReplicaEvent::Committed { record, proposal } = ev {
                    self.ledger.faulty_commits.entry(record.view).or_insert(proposal);
                }
            }
            self.dispatch(id, out.messages);
        }
        self.now = now + 1;
    }

    fn record(&mut self, id: NodeId, ev: ReplicaEvent) {
        let l = &mut self.ledger;
        match ev {
            ReplicaEvent::EnteredView { view, leader, at } => {
                l.views.entry(view).or_insert(ViewRecord {
                    view,
                    leader,
                    started_at: at.0,
                    committed: None,
                    honest_view_changes: 0,
                });
            }
            ReplicaEvent::Committed { record, proposal } => {
                l.commits.entry(record.view).or_default().insert(id, record.digest);
                l.proposals.entry(record.view).or_insert(proposal);
                if let Some(v) = l.views.get_mut(&record.view) {
                    v.committed.get_or_insert(record.digest);
                }
            }
            ReplicaEvent::ViewChange { view, .. } => {
                if let Some(v) = l.views.get_mut(&view) {
                    v.honest_view_changes += 1;
                }
            }
            ReplicaEvent::DemandServed { view, demand, .. } => {
                l.served.insert((view, demand));
            }
            ReplicaEvent::Endpoint(o) => {
                l.outputs.insert((o.view, o.demand, o.role), o);
            }
            ReplicaEvent::Equivocation { .. } | ReplicaEvent::KcMismatch { .. } => {
                l.evidence.push((id, ev));
            }
            ReplicaEvent::Rejected { .. } => l.rejected += 1,
            ReplicaEvent::ForgeryAccepted { .. } => l.forged_accepted = true,
            _ => {}
        }
    }

    fn dispatch(&mut self, id: NodeId, msgs: Vec<ProtocolMessage>) {
        if msgs.is_empty() {
            return;
        }
        let outbound = match self.scripts.get(&id) {
            None => {
                for m in &msgs {
                    self.ledger
                        .signed
                        .entry(m.ts.key_ref)
                        .or_default()
                        .insert(m.signed_bytes());
                }
                msgs.into_iter().map(Outbound::broadcast).collect()
            }
            Some(script) => {
                let r = &self.replicas[id];
                let (view, start) = (r.view(), r.view_start());
                let keys = &self.env.keys;
                let key = |m: &ProtocolMessage| keys.get(&m.ts.key_ref).cloned();
                let mut ctx = AdversaryCtx {
                    graph: &self.graph,
                    honest: &self.honest,
                    params: &self.cfg.security,
                    rng: &mut self.rng,
                    key: &key,
                };
                let mut all = Vec::new();
                for m in msgs {
                    let back = view.saturating_sub(m.view) * FRAME_SLOTS;
                    let slot = self.now - Tick(start.0.saturating_sub(back));
                    all.extend(adversary_act(script, id, slot, vec![m], &mut ctx));
                }
                all
            }
        };
        let n = self.replicas.len();
        for o in outbound {
            let at = self.now + o.delay;
            let recipients: Vec<NodeId> = match &o.to {
                Recipients::All => (0..n).filter(|&r| r != id).collect(),
                Recipients::Only(list) => list.iter().copied().filter(|&r| r != id).collect(),
            };
            let now = self.now;
            self.log(|| {
                let evidence = match &o.msg.payload {
                    Payload::ViewChange { evidence: Some(_) } => " evidence",
                    _ => "",
                };
                format!(
                    "{now} node={id} send {:?} view={} source={} to={:?} deliver={at}{evidence}",
                    o.msg.step, o.msg.view, o.msg.source, recipients
                )
            });
            let q = self.queue.entry(at).or_default();
            for r in recipients {
                q.push(Delivery {
                    recipient: r,
                    sender: id,
                    msg: o.msg.clone(),
                });
            }
        }
    }

    fn settled(&self) -> bool {
        self.honest
            .iter()
            .all(|&h| self.replicas[h].book().is_settled(&self.graph, self.cfg.f))
    }

    fn past_view_limit(&self) -> bool {
        self.honest
            .iter()
            .all(|&h| self.replicas[h].view() >= self.cfg.view_limit)
    }

    /// Runs until every honest node has settled its demands or the view
    /// limit is reached, then reports.
    pub fn run(&mut self) -> MetricsReport {
        let max_ticks = (self.cfg.view_limit + 1) * TIMER_SLOTS;
        let mut done_at = None;
        while self.now.0 <= max_ticks {
            let tick = self.now;
            self.advance_slot();
            if self.settled() {
                done_at = Some(tick);
                break;
            }
            if self.past_view_limit() {
                break;
            }
        }
        self.report(done_at)
    }

    fn report(&self, done_at: Option<Tick>) -> MetricsReport {
        let l = &self.ledger;
        let byz: BTreeSet<NodeId> = self.scripts.keys().copied().collect();
        let safety = l
            .commits
            .values()
            .any(|by_node| by_node.values().collect::<BTreeSet<_>>().len() > 1);

        let summarize = |view: u64, digest: ProposalDigest, proposal: &Proposal| CommittedView {
            view,
            digest,
            plans: proposal
                .plans
                .iter()
                .map(|p| PlanSummary {
                    demand: p.demand,
                    per_path_bits: p.per_path_bits(),
                    hops: p.paths.paths.iter().map(|r| r.len() - 1).collect(),
                    routes: p.paths.paths.clone(),
                })
                .collect(),
        };
        let committed: Vec<CommittedView> = l
            .commits
            .iter()
            .map(|(&view, by_node)| {
                let digest = *by_node.values().next().expect("non-empty");
                summarize(view, digest, &l.proposals[&view])
            })
            .collect();
        let faulty_only_commits: Vec<CommittedView> = l
            .faulty_commits
            .iter()
            .filter(|(view, _)| !l.commits.contains_key(view))
            .map(|(&view, p)| summarize(view, p.digest(&self.env.seeds), p))
            .collect();

        let mut key_mismatch = false;
        let mut demands = Vec::new();
        let book = self.replicas[self.honest.first().copied().unwrap_or(0)].book();
        for &id in &self.demands {
            let d = book.get(id).expect("registered").clone();
            let mut served = 0;
            let mut leaked = 0;
            let mut final_bits = 0;
            let mut views = Vec::new();
            for &(view, _) in l.served.iter().filter(|(_, dd)| *dd == id) {
                let Some(plan) = l.proposals[&view].plans.iter().find(|p| p.demand == id) else {
                    continue;
                };
                views.push(view);
                let beta = plan.paths.len();
                let per_path = plan.per_path_bits();
                let src_out = l.outputs.get(&(view, id, EndpointRole::Source));
                let dst_out = l.outputs.get(&(view, id, EndpointRole::Destination));
                let mut exposed: BTreeSet<usize> = BTreeSet::new();
                for o in [src_out, dst_out].into_iter().flatten() {
                    exposed.extend(&o.exposed);
                }
                let compromised = if byz.contains(&d.src) || byz.contains(&d.dst) {
                    beta
                } else {
                    plan.paths
                        .paths
                        .iter()
                        .enumerate()
                        .filter(|(i, r)| {
                            exposed.contains(i) || r[1..r.len() - 1].iter().any(|n| byz.contains(n))
                        })
                        .count()
                };
                served += per_path * beta as u64;
                leaked += per_path * compromised as u64;
                if let (Some(s), Some(t)) = (src_out, dst_out) {
                    if s.segments != t.segments {
                        key_mismatch = true;
                    }
                    let assumed = (self.cfg.f + exposed.len()).min(beta);
                    let pre = (per_path * beta as u64) as usize;
                    final_bits += final_key_len(
                        pre,
                        LeakedFraction::new(assumed, beta),
                        &self.cfg.security,
                    ) as u64;
                }
            }
            let eavesdrop_percent = if served == 0 {
                100.0
            } else {
                100.0 * leaked as f64 / served as f64
            };
            demands.push(DemandReport {
                demand: id,
                src: d.src,
                dst: d.dst,
                amount_bits: d.amount_bits,
                served_bits: served,
                leaked_bits: leaked,
                eavesdrop_percent,
                final_key_bits: final_bits,
                views,
            });
        }
        let eavesdrop_percent = demands
            .iter()
            .map(|d| d.eavesdrop_percent)
            .fold(0.0, f64::max);

        let last_tick = self.now.0.saturating_sub(1);
        let ledger = self.env.store.ledger();
        let consensus_bits = ledger.total(Purpose::Consensus);
        let delivery_bits = ledger.total(Purpose::Delivery);
        let any_served = demands.iter().any(|d| d.served_bits > 0);
        let time_seconds = done_at
            .filter(|_| any_served)
            .map(|t| t.seconds(self.cfg.delta_seconds));

        MetricsReport {
            name: self.cfg.name.clone(),
            seed: self.cfg.seed,
            f: self.cfg.f,
            nodes: self.graph.node_count(),
            connectivity: node_connectivity(&self.graph),
            consensus_bits,
            delivery_bits,
            total_bits: consensus_bits + delivery_bits,
            eavesdrop_percent,
            demands,
            time_seconds,
            ticks: self.now.0,
            views_executed: l
                .views
                .values()
                .filter(|v| v.started_at + FRAME_SLOTS <= done_at.map_or(last_tick, |t| t.0))
                .count() as u64,
            committed,
            faulty_only_commits,
            view_log: l.views.values().cloned().collect(),
            ts_key_draws: self.env.draws.clone(),
            evidence: l.evidence.len(),
            rejected_messages: l.rejected,
            violations: Violations {
                safety,
                liveness: l.stalled,
                key_mismatch,
                ledger: consensus_bits + delivery_bits != self.env.store.consumed_bits(),
                key_reuse: l.signed.values().any(|s| s.len() > 1),
                forgery_accepted: l.forged_accepted,
            },
        }
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    Ok(World::new(cfg)?.run())
}

/// Runs a scenario and returns its report with the per-slot trace.
pub fn run_scenario_traced(cfg: &ScenarioConfig) -> Result<(MetricsReport, Vec<String>), SimError> {
    let mut w = World::new(cfg)?.with_trace();
    let r = w.run();
    Ok((r, w.trace.take().unwrap_or_default()))
}
