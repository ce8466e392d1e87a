//! One node's consensus state machine.
//!
//! A view is a fixed frame of slots relative to its start tick `s`:
//!
//! | slot | action                                   | signs with |
//! |------|------------------------------------------|------------|
//! | s+0  | leader: Propose                          | K^1        |
//! | s+1  | others: Vote (echoing the leader message)| K^1        |
//! | s+2  | Verify on 2f+1 provisional votes         | K^2        |
//! | s+3  | Revote once the leader key is disclosed  | K^3        |
//! | s+4  | RevoteVerify on 2f+1 provisional revotes | K^4        |
//! | s+5  | Commit on f+1 verified revotes           | K^5        |
//! | s+6  | KcVerify: calibrations and key echoes    | K^6        |
//! | s+7  | close: outputs, election, next view      |            |
//! | s+8  | timer: ViewChange, join the next view    | K^7        |
//!
//! Every message discloses the keys that signed this node's earlier
//! messages, so a tally is provisional until one slot after receipt.
//! A node that gives up on a view broadcasts ViewChange in each remaining
//! slot, which keeps its disclosures flowing.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::election::elect_leader;
use super::message::{Disclosure, Equivocation, Payload, ProtocolMessage, Step};
use super::proposal::{
    build_proposal, validate_proposal, Budget, DemandBook, DemandId, Proposal, ProposalDefect,
    ProposalDigest,
};
use crate::bits::Bits;
use crate::crypto::{
    ts_share_bits, ts_sign, ts_verify_with, CryptoError, KeyRef, Rejection, SecurityParams, SeedSchedule,
    TemporarySignature, TsKey, VerifyContext,
};
use crate::keydist::{
    bidirectional_segment, calibrate_aggregate, consistent_calibrations, endpoint_check,
    kc_transmit, make_key_closure, Calibration, EndpointRole, KeyClosure, PathId,
};
use crate::keystore::{KeyBlock, KeyStoreError};
use crate::time::Tick;
use crate::topology::{local_connectivity_avoiding, Edge, Graph, NodeId};

/// Slots in a view frame; the next view starts this many ticks later.
pub const FRAME_SLOTS: u64 = 7;
/// Leader timer length in ticks.
pub const TIMER_SLOTS: u64 = 8;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Key(#[from] KeyStoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("link {0:?} is not incident to node {1}")]
    NotIncident(Edge, NodeId),
}

/// What a node may ask of its own hardware: its signing keys and the
/// key blocks of its incident links.
pub trait NodeEnv {
    fn ts_key(&mut self, node: NodeId, view: u64, step_index: u8) -> Result<TsKey, EnvError>;
    fn delivery_block(
        &mut self,
        node: NodeId,
        view: u64,
        path: PathId,
        edge: Edge,
        len: u64,
    ) -> Result<KeyBlock, EnvError>;
    /// Pool balance of `edge` as published at the start of `view`.
    fn pool_available(&self, edge: Edge, view: u64) -> u64;
}

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub graph: Arc<Graph>,
    pub f: usize,
    pub params: SecurityParams,
    pub seeds: SeedSchedule,
    pub cap_bits: u64,
    /// Propagation bound in ticks.
    pub delta: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub view: u64,
    pub digest: ProposalDigest,
    pub node: NodeId,
    pub at: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewChangeReason {
    InvalidProposal(ProposalDefect),
    NoProposal,
    FewVotes,
    LeaderSignature(Rejection),
    Equivocation,
    RelayedEquivocation,
    FewRevotes,
    NoCommitQuorum,
    Timer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointOutput {
    pub view: u64,
    pub demand: DemandId,
    pub role: EndpointRole,
    pub segments: Vec<Bits>,
    pub exposed: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicaEvent {
    EnteredView {
        view: u64,
        leader: NodeId,
        at: Tick,
    },
    Proposed {
        view: u64,
        digest: ProposalDigest,
    },
    Committed {
        record: CommitRecord,
        proposal: Proposal,
    },
    ViewChange {
        view: u64,
        at: Tick,
        reason: ViewChangeReason,
    },
    Equivocation {
        view: u64,
        leader: NodeId,
    },
    KcMismatch {
        view: u64,
        path: PathId,
    },
    DemandServed {
        view: u64,
        demand: DemandId,
        bits: u64,
    },
    DemandAborted {
        view: u64,
        demand: DemandId,
    },
    Endpoint(EndpointOutput),
    Rejected {
        view: u64,
        step: Step,
        claimed_source: NodeId,
        reason: Rejection,
    },
    SigningFailed {
        view: u64,
        step_index: u8,
        error: String,
    },
    TimerFired {
        view: u64,
        at: Tick,
    },
    /// A message relayed by someone other than its claimed source
    /// verified under the source's key.
    ForgeryAccepted {
        view: u64,
        claimed_source: NodeId,
    },
}

#[derive(Debug, Default)]
pub struct StepOutput {
    pub messages: Vec<ProtocolMessage>,
    pub events: Vec<ReplicaEvent>,
}

#[derive(Debug, Clone)]
struct Received {
    msg: ProtocolMessage,
    sender: NodeId,
    at: Tick,
    verdict: Option<Result<(), Rejection>>,
    /// Approval and digest of the proposal a vote echoes.
    vote: Option<(bool, ProposalDigest)>,
}

impl Received {
    fn direct(&self) -> bool {
        self.sender == self.msg.source
    }

    fn provisional(&self) -> bool {
        self.direct() && !matches!(self.verdict, Some(Err(_)))
    }

    fn verified(&self) -> bool {
        self.direct() && self.verdict == Some(Ok(()))
    }
}

/// Per-view protocol state.
#[derive(Debug, Clone)]
pub struct ViewState {
    pub view: u64,
    pub start: Tick,
    pub leader: NodeId,
    pub phase: Step,
    pub leader_timer_deadline: Tick,
    pub committed: Option<ProposalDigest>,
    pub view_changing: bool,
    pub equivocation_evidence: Option<Equivocation>,
    proposal_msg: Option<ProtocolMessage>,
    proposal: Option<Proposal>,
    digest: Option<ProposalDigest>,
    approve: bool,
    first_ts: Option<TemporarySignature>,
    inbox: Vec<Received>,
    own_closures: Vec<KeyClosure>,
    link_segments: BTreeMap<PathId, Bits>,
    aggregates: BTreeMap<PathId, Bits>,
    calibrations: BTreeMap<PathId, Calibration>,
    echoes: Vec<Disclosure>,
    closed: bool,
}

impl ViewState {
    fn new(view: u64, start: Tick, leader: NodeId) -> Self {
        Self {
            view,
            start,
            leader,
            phase: Step::Propose,
            leader_timer_deadline: start + TIMER_SLOTS,
            committed: None,
            view_changing: false,
            equivocation_evidence: None,
            proposal_msg: None,
            proposal: None,
            digest: None,
            approve: false,
            first_ts: None,
            inbox: Vec::new(),
            own_closures: Vec::new(),
            link_segments: BTreeMap::new(),
            aggregates: BTreeMap::new(),
            calibrations: BTreeMap::new(),
            echoes: Vec::new(),
            closed: false,
        }
    }

    fn advance(&mut self, phase: Step) {
        if phase > self.phase || phase == Step::ViewChange {
            self.phase = phase;
        }
    }
}

pub struct Replica {
    id: NodeId,
    cfg: ReplicaConfig,
    book: DemandBook,
    state: ViewState,
    previous: Option<ViewState>,
    future: Vec<Received>,
    disclosed: BTreeMap<KeyRef, TsKey>,
    own_keys: BTreeMap<KeyRef, TsKey>,
    undisclosed: Vec<(KeyRef, Tick)>,
    heard: BTreeMap<Tick, BTreeSet<NodeId>>,
    commits: Vec<CommitRecord>,
    paths_cache: RefCell<BTreeMap<(NodeId, BTreeSet<NodeId>), usize>>,
}

impl Replica {
    pub fn new(id: NodeId, cfg: ReplicaConfig, book: DemandBook) -> Self {
        Self {
            id,
            cfg,
            book,
            state: ViewState::new(0, Tick::ZERO, 0),
            previous: None,
            future: Vec::new(),
            disclosed: BTreeMap::new(),
            own_keys: BTreeMap::new(),
            undisclosed: Vec::new(),
            heard: BTreeMap::new(),
            commits: Vec::new(),
            paths_cache: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn state(&self) -> &ViewState {
        &self.state
    }

    pub fn view(&self) -> u64 {
        self.state.view
    }

    pub fn view_start(&self) -> Tick {
        self.state.start
    }

    pub fn book(&self) -> &DemandBook {
        &self.book
    }

    pub fn commits(&self) -> &[CommitRecord] {
        &self.commits
    }

    /// Accepts a delivered message. Anything older than Δ is untrusted and
    /// dropped; disclosures ride only on messages from their owner.
    pub fn handle_message(
        &mut self,
        msg: ProtocolMessage,
        sender: NodeId,
        now: Tick,
        out: &mut StepOutput,
    ) {
        if now - msg.ts.signed_at > self.cfg.delta || msg.ts.signed_at > now {
            out.events.push(ReplicaEvent::Rejected {
                view: msg.view,
                step: msg.step,
                claimed_source: msg.source,
                reason: Rejection::Expired,
            });
            return;
        }
        self.heard.entry(now).or_default().insert(sender);
        if sender == msg.source {
            for d in &msg.disclosed {
                if d.key_ref.owner == sender {
                    self.disclosed.entry(d.key_ref).or_insert_with(|| {
                        TsKey::disclosed(d.key_ref, d.material.clone(), msg.ts.signed_at)
                    });
                }
            }
        }
        let vote = match &msg.payload {
            Payload::Vote {
                approve,
                proposal: Some(m),
            } if msg.step == Step::Vote => m
                .proposal()
                .map(|p| (*approve, p.digest(&self.cfg.seeds))),
            _ => None,
        };
        let r = Received {
            msg,
            sender,
            at: now,
            verdict: None,
            vote,
        };
        match r.msg.view.cmp(&self.state.view) {
            std::cmp::Ordering::Equal => self.state.inbox.push(r),
            std::cmp::Ordering::Greater => self.future.push(r),
            std::cmp::Ordering::Less => {
                if let Some(prev) = self.previous.as_mut().filter(|p| p.view == r.msg.view) {
                    prev.inbox.push(r);
                }
            }
        }
    }

    /// Runs this tick's slot of the current view.
    pub fn step(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        self.settle_verdicts(now, out);
        let t = now - self.state.start;
        match t {
            0 => self.slot_propose(now, env, out),
            1 => self.slot_vote(now, env, out),
            2 => self.slot_verify(now, env, out),
            3 => self.slot_revote(now, env, out),
            4 => self.slot_revote_verify(now, env, out),
            5 => self.slot_commit(now, env, out),
            6 => self.slot_kc_verify(now, env, out),
            7 => {
                if self.close_view(now, out) {
                    self.slot_propose(now, env, out);
                }
            }
            _ => {
                if now >= self.state.leader_timer_deadline {
                    self.on_timer(now, env, out);
                }
            }
        }
        self.heard.retain(|&k, _| k.0 + 2 > now.0);
    }

    /// Leader timer expiry: one ViewChange with a fresh key, then join the
    /// next view, whose frame began one slot earlier.
    pub fn on_timer(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if self.state.closed {
            return;
        }
        out.events.push(ReplicaEvent::TimerFired {
            view: self.state.view,
            at: now,
        });
        let evidence = self.state.equivocation_evidence.clone();
        self.send(Step::ViewChange, Payload::ViewChange { evidence }, 7, now, env, out);
        out.events.push(ReplicaEvent::ViewChange {
            view: self.state.view,
            at: now,
            reason: ViewChangeReason::Timer,
        });
        let leader = self.next_leader();
        let start = self.state.start + FRAME_SLOTS;
        self.enter_view(self.state.view + 1, start, leader, now, out);
        self.settle_verdicts(now, out);
        self.slot_vote(now, env, out);
    }

    fn settle_verdicts(&mut self, now: Tick, out: &mut StepOutput) {
        let mut results = Vec::new();
        for (i, r) in self.state.inbox.iter().enumerate() {
            if r.verdict.is_none() && self.disclosed.contains_key(&r.msg.ts.key_ref) {
                results.push((i, self.verify(&r.msg, r.at, now)));
            }
        }
        for (i, v) in results {
            let r = &mut self.state.inbox[i];
            r.verdict = Some(v);
            if v.is_ok() && !r.direct() {
                out.events.push(ReplicaEvent::ForgeryAccepted {
                    view: r.msg.view,
                    claimed_source: r.msg.source,
                });
            }
            if let Err(reason) = v {
                out.events.push(ReplicaEvent::Rejected {
                    view: r.msg.view,
                    step: r.msg.step,
                    claimed_source: r.msg.source,
                    reason,
                });
            }
        }
    }

    fn verify(&self, msg: &ProtocolMessage, received_at: Tick, now: Tick) -> Result<(), Rejection> {
        let kr = msg.ts.key_ref;
        if kr.owner != msg.source || msg.ts.signer != msg.source || kr.view != msg.view {
            return Err(Rejection::BadTag);
        }
        let Some(key) = self.disclosed.get(&kr) else {
            return Err(Rejection::NotDisclosed);
        };
        let mut present: BTreeSet<NodeId> = [self.id, msg.source].into();
        for tick in [now, Tick(now.0.saturating_sub(1))] {
            if let Some(h) = self.heard.get(&tick) {
                present.extend(h);
            }
        }
        let missing: BTreeSet<NodeId> = (0..self.cfg.graph.node_count())
            .filter(|n| !present.contains(n))
            .collect();
        let ctx = VerifyContext {
            verifier: self.id,
            f: self.cfg.f,
            received_at,
            delta: self.cfg.delta,
        };
        ts_verify_with(&msg.ts, &msg.signed_bytes(), key, ctx, &self.cfg.params, || {
            let signer = msg.ts.signer;
            *self
                .paths_cache
                .borrow_mut()
                .entry((signer, missing.clone()))
                .or_insert_with(|| {
                    local_connectivity_avoiding(&self.cfg.graph, signer, self.id, &missing)
                })
        })
    }

    fn send(
        &mut self,
        step: Step,
        payload: Payload,
        step_index: u8,
        now: Tick,
        env: &mut dyn NodeEnv,
        out: &mut StepOutput,
    ) -> Option<TemporarySignature> {
        let view = self.state.view;
        let key = match env.ts_key(self.id, view, step_index) {
            Ok(k) => k,
            Err(e) => {
                out.events.push(ReplicaEvent::SigningFailed {
                    view,
                    step_index,
                    error: e.to_string(),
                });
                return None;
            }
        };
        let (ready, later): (Vec<_>, Vec<_>) = self.undisclosed.iter().partition(|(_, at)| *at < now);
        let disclosed: Vec<Disclosure> = ready
            .iter()
            .filter_map(|(kr, _)| self.own_keys.get(kr))
            .map(|k| Disclosure {
                key_ref: k.key_ref(),
                material: k.material().clone(),
            })
            .collect();
        let bytes = ProtocolMessage::signing_bytes(step, view, self.id, &payload, &disclosed);
        let ts = match ts_sign(&key, &bytes, now, &self.cfg.params) {
            Ok(ts) => ts,
            Err(e) => {
                out.events.push(ReplicaEvent::SigningFailed {
                    view,
                    step_index,
                    error: e.to_string(),
                });
                return None;
            }
        };
        self.undisclosed = later;
        self.undisclosed.push((key.key_ref(), now));
        self.own_keys.insert(key.key_ref(), key);
        out.messages.push(ProtocolMessage {
            step,
            view,
            source: self.id,
            payload,
            disclosed,
            ts: ts.clone(),
        });
        Some(ts)
    }

    fn view_change(
        &mut self,
        reason: ViewChangeReason,
        step_index: u8,
        now: Tick,
        env: &mut dyn NodeEnv,
        out: &mut StepOutput,
    ) {
        if !self.state.view_changing {
            self.state.view_changing = true;
            out.events.push(ReplicaEvent::ViewChange {
                view: self.state.view,
                at: now,
                reason,
            });
        }
        self.state.advance(Step::ViewChange);
        let evidence = self.state.equivocation_evidence.clone();
        self.send(Step::ViewChange, Payload::ViewChange { evidence }, step_index, now, env, out);
    }

    /// Pool balance at view start minus what both endpoints may still draw
    /// for signing keys before delivery: one key per slot of the view plus
    /// the previous view's late view-change key.
    fn budget_fn<'a>(&'a self, env: &'a dyn NodeEnv) -> impl Fn(Edge) -> u64 + 'a {
        let view = self.state.view;
        let g = &self.cfg.graph;
        let (f, l) = (self.cfg.f, self.cfg.params.ts_key_len_bits);
        move |e: Edge| {
            let reserve: usize = [e.0, e.1]
                .iter()
                .map(|&n| TIMER_SLOTS as usize * ts_share_bits(g.degree(n), f, l))
                .sum();
            env.pool_available(e, view).saturating_sub(reserve as u64)
        }
    }

    fn slot_propose(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if self.state.leader != self.id
            || self.state.proposal.is_some()
            || self.book.is_settled(&self.cfg.graph, self.cfg.f)
        {
            return;
        }
        let proposal = {
            let pools = self.budget_fn(&*env);
            let budget = Budget {
                cap_bits: self.cfg.cap_bits,
                pool_available: &pools,
            };
            build_proposal(self.state.view, &self.book, &self.cfg.graph, self.cfg.f, &budget)
        };
        let digest = proposal.digest(&self.cfg.seeds);
        let payload = Payload::Propose {
            proposal: proposal.clone(),
        };
        if let Some(ts) = self.send(Step::Propose, payload, 1, now, env, out) {
            self.state.proposal_msg = out.messages.last().cloned();
            self.state.first_ts = Some(ts);
        }
        self.state.proposal = Some(proposal);
        self.state.digest = Some(digest);
        self.state.approve = true;
        out.events.push(ReplicaEvent::Proposed {
            view: self.state.view,
            digest,
        });
    }

    fn slot_vote(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if self.state.leader == self.id || self.state.first_ts.is_some() {
            return;
        }
        self.state.advance(Step::Vote);
        let leader = self.state.leader;
        let leader_msg = self
            .state
            .inbox
            .iter()
            .find(|r| r.direct() && r.msg.source == leader && r.msg.step == Step::Propose)
            .map(|r| r.msg.clone());
        let mut approve = false;
        if let Some(m) = &leader_msg {
            let p = m.proposal().expect("propose carries a proposal").clone();
            let check = {
                let pools = self.budget_fn(&*env);
                let budget = Budget {
                    cap_bits: self.cfg.cap_bits,
                    pool_available: &pools,
                };
                validate_proposal(&p, self.state.view, &self.book, &self.cfg.graph, self.cfg.f, &budget)
            };
            match check {
                Ok(()) => approve = true,
                Err(defect) => out.events.push(ReplicaEvent::ViewChange {
                    view: self.state.view,
                    at: now,
                    reason: ViewChangeReason::InvalidProposal(defect),
                }),
            }
            self.state.digest = Some(p.digest(&self.cfg.seeds));
            self.state.proposal = Some(p);
        }
        self.state.approve = approve;
        self.state.proposal_msg = leader_msg.clone();
        let payload = Payload::Vote {
            approve,
            proposal: leader_msg.map(Box::new),
        };
        self.state.first_ts = self.send(Step::Vote, payload, 1, now, env, out);
    }

    fn vote_digest(&self, r: &Received) -> Option<(bool, ProposalDigest)> {
        r.vote
    }

    fn approvals(&self, verified: bool) -> usize {
        let Some(own) = self.state.digest else {
            return 0;
        };
        let mut voters: BTreeSet<NodeId> = self
            .state
            .inbox
            .iter()
            .filter(|r| if verified { r.verified() } else { r.provisional() })
            .filter(|r| r.msg.source != self.state.leader)
            .filter(|r| self.vote_digest(r) == Some((true, own)))
            .map(|r| r.msg.source)
            .collect();
        if self.id != self.state.leader && self.state.approve {
            voters.insert(self.id);
        }
        voters.len()
    }

    fn quorum(&self) -> usize {
        2 * self.cfg.f + 1
    }

    fn slot_verify(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if self.state.view_changing {
            return self.view_change(ViewChangeReason::FewVotes, 2, now, env, out);
        }
        let reason = match (self.state.digest, self.state.approve) {
            (None, _) => Some(ViewChangeReason::NoProposal),
            (Some(_), false) => Some(ViewChangeReason::FewVotes),
            (Some(_), true) if self.approvals(false) < self.quorum() => Some(ViewChangeReason::FewVotes),
            _ => None,
        };
        if let Some(reason) = reason {
            return self.view_change(reason, 2, now, env, out);
        }
        self.state.advance(Step::Verify);
        let digest = self.state.digest.expect("checked above");
        self.send(Step::Verify, Payload::Verify { digest }, 2, now, env, out);
    }

    /// Accepts a leader message seen directly or echoed in a vote: its
    /// signature must verify once the leader key is public. Echoes are
    /// judged on content, not on arrival time.
    fn leader_message_valid(&self, m: &ProtocolMessage, now: Tick) -> Result<(), Rejection> {
        if m.source != self.state.leader || m.step != Step::Propose || m.view != self.state.view {
            return Err(Rejection::BadTag);
        }
        if m.source == self.id {
            return Ok(());
        }
        self.verify(m, m.ts.signed_at, now)
    }

    fn find_equivocation(&self, now: Tick) -> Option<Equivocation> {
        let mut candidates: Vec<&ProtocolMessage> = Vec::new();
        for r in &self.state.inbox {
            match (&r.msg.payload, r.direct()) {
                (Payload::Propose { .. }, true) if r.msg.source == self.state.leader => {
                    candidates.push(&r.msg)
                }
                (Payload::Vote {
                    proposal: Some(m), ..
                }, true) => candidates.push(m),
                _ => {}
            }
        }
        if let Some(m) = &self.state.proposal_msg {
            candidates.push(m);
        }
        let mut valid: Vec<&ProtocolMessage> = Vec::new();
        for m in candidates {
            if valid.iter().any(|v| v.proposal() == m.proposal()) {
                continue;
            }
            if self.leader_message_valid(m, now).is_ok() {
                valid.push(m);
            }
            if valid.len() == 2 {
                return Some(Equivocation {
                    first: Box::new(valid[0].clone()),
                    second: Box::new(valid[1].clone()),
                });
            }
        }
        None
    }

    fn equivocation_valid(&self, e: &Equivocation, now: Tick) -> bool {
        e.first.proposal() != e.second.proposal()
            && self.leader_message_valid(&e.first, now).is_ok()
            && self.leader_message_valid(&e.second, now).is_ok()
    }

    fn slot_revote(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if let Some(e) = self.find_equivocation(now) {
            out.events.push(ReplicaEvent::Equivocation {
                view: self.state.view,
                leader: self.state.leader,
            });
            self.state.equivocation_evidence = Some(e);
            return self.view_change(ViewChangeReason::Equivocation, 3, now, env, out);
        }
        if self.state.view_changing {
            return self.view_change(ViewChangeReason::FewVotes, 3, now, env, out);
        }
        if self.state.leader != self.id {
            let check = match &self.state.proposal_msg {
                Some(m) => self.leader_message_valid(m, now),
                None => Err(Rejection::NotDisclosed),
            };
            if let Err(r) = check {
                return self.view_change(ViewChangeReason::LeaderSignature(r), 3, now, env, out);
            }
            if self.approvals(true) < self.quorum() {
                return self.view_change(ViewChangeReason::FewVotes, 3, now, env, out);
            }
        }
        self.state.advance(Step::Revote);
        let digest = self.state.digest.expect("verified a proposal");
        let ts_pre = self.state.first_ts.clone();
        self.send(Step::Revote, Payload::Revote { digest, ts_pre }, 3, now, env, out);
    }

    fn revoters(&self, verified: bool) -> usize {
        let Some(own) = self.state.digest else {
            return 0;
        };
        let mut voters: BTreeSet<NodeId> = self
            .state
            .inbox
            .iter()
            .filter(|r| if verified { r.verified() } else { r.provisional() })
            .filter(|r| matches!(&r.msg.payload, Payload::Revote { digest, .. } if *digest == own))
            .map(|r| r.msg.source)
            .collect();
        voters.insert(self.id);
        voters.len()
    }

    fn slot_revote_verify(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if !self.state.view_changing {
            let relayed = self.state.inbox.iter().find_map(|r| match &r.msg.payload {
                Payload::ViewChange { evidence: Some(e) } if self.equivocation_valid(e, now) => {
                    Some(e.clone())
                }
                _ => None,
            });
            if let Some(e) = relayed {
                out.events.push(ReplicaEvent::Equivocation {
                    view: self.state.view,
                    leader: self.state.leader,
                });
                self.state.equivocation_evidence = Some(e);
                return self.view_change(ViewChangeReason::RelayedEquivocation, 4, now, env, out);
            }
        }
        if self.state.view_changing || self.revoters(false) < self.quorum() {
            return self.view_change(ViewChangeReason::FewRevotes, 4, now, env, out);
        }
        self.state.advance(Step::RevoteVerify);
        let digest = self.state.digest.expect("revoted");
        self.send(Step::RevoteVerify, Payload::RevoteVerify { digest }, 4, now, env, out);
    }

    fn slot_commit(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if self.state.view_changing || self.revoters(true) < self.cfg.f + 1 {
            return self.view_change(ViewChangeReason::NoCommitQuorum, 5, now, env, out);
        }
        let digest = self.state.digest.expect("revoted");
        let proposal = self.state.proposal.clone().expect("revoted");
        self.state.committed = Some(digest);
        self.state.advance(Step::Commit);
        let record = CommitRecord {
            view: self.state.view,
            digest,
            node: self.id,
            at: now,
        };
        self.commits.push(record);
        out.events.push(ReplicaEvent::Committed {
            record,
            proposal: proposal.clone(),
        });

        let view = self.state.view;
        let mut closures = Vec::new();
        for plan in &proposal.plans {
            let amount = plan.per_path_bits();
            for (index, route) in plan.paths.paths.iter().enumerate() {
                let Some(pos) = route.iter().position(|&n| n == self.id) else {
                    continue;
                };
                let path = PathId {
                    demand: plan.demand,
                    index,
                };
                let mut block = |a: NodeId, b: NodeId| {
                    env.delivery_block(self.id, view, path, Edge::new(a, b), amount).ok()
                };
                if pos == 0 {
                    if let Some(b) = block(route[0], route[1]) {
                        self.state.link_segments.insert(path, b.material);
                    }
                } else if pos == route.len() - 1 {
                    if let Some(b) = block(route[pos - 1], route[pos]) {
                        self.state.link_segments.insert(path, b.material);
                    }
                } else if let (Some(i), Some(o)) =
                    (block(route[pos - 1], route[pos]), block(route[pos], route[pos + 1]))
                {
                    if let Ok(c) = make_key_closure(self.id, path, &i, &o) {
                        closures.push(c);
                    }
                }
            }
        }
        self.state.own_closures = closures.clone();
        self.send(Step::Commit, Payload::Commit { digest, closures }, 5, now, env, out);
    }

    /// Closures on `path` from the node that owns them, taken from direct
    /// Commit messages for our digest (plus our own).
    fn path_closures(&self, path: PathId, verified_only: bool) -> Vec<KeyClosure> {
        let own = self.state.committed;
        let mut cs: Vec<KeyClosure> = self
            .state
            .own_closures
            .iter()
            .filter(|c| c.path == path)
            .cloned()
            .collect();
        for r in &self.state.inbox {
            if !(if verified_only { r.verified() } else { r.provisional() }) {
                continue;
            }
            if let Payload::Commit { digest, closures } = &r.msg.payload {
                if Some(*digest) != own {
                    continue;
                }
                cs.extend(
                    closures
                        .iter()
                        .filter(|c| c.path == path && c.node == r.msg.source)
                        .cloned(),
                );
            }
        }
        cs
    }

    fn slot_kc_verify(&mut self, now: Tick, env: &mut dyn NodeEnv, out: &mut StepOutput) {
        if self.state.committed.is_none() {
            return self.view_change(ViewChangeReason::NoCommitQuorum, 6, now, env, out);
        }
        self.state.advance(Step::KcVerify);
        let proposal = self.state.proposal.clone().expect("committed");
        let view = self.state.view;
        let cal_seed = self.cfg.seeds.calibration(view);
        let check_seed = self.cfg.seeds.endpoint_check(view);
        let mut calibrations = Vec::new();
        let mut checks = Vec::new();
        for plan in &proposal.plans {
            let amount = plan.per_path_bits() as usize;
            for (index, route) in plan.paths.paths.iter().enumerate() {
                let path = PathId {
                    demand: plan.demand,
                    index,
                };
                let Ok(aggregate) = kc_transmit(route, &self.path_closures(path, false), amount) else {
                    continue;
                };
                let c = calibrate_aggregate(path, &aggregate, self.id, cal_seed);
                calibrations.push(c);
                self.state.calibrations.insert(path, c);
                if let Some(link) = self.state.link_segments.get(&path).cloned() {
                    let (role, segment) = if route[0] == self.id {
                        (EndpointRole::Source, link)
                    } else {
                        (EndpointRole::Destination, aggregate.xor(&link))
                    };
                    checks.push(endpoint_check(path, role, &segment, check_seed));
                    self.state.link_segments.insert(path, segment);
                }
                self.state.aggregates.insert(path, aggregate);
            }
        }
        let mut echoes: Vec<Disclosure> = (0..self.cfg.graph.node_count())
            .map(|owner| KeyRef {
                owner,
                view,
                step_index: 4,
            })
            .filter_map(|k| self.disclosed.get(&k))
            .map(|key| Disclosure {
                key_ref: key.key_ref(),
                material: key.material().clone(),
            })
            .collect();
        let own_k4 = KeyRef {
            owner: self.id,
            view,
            step_index: 4,
        };
        if let Some(k) = self.own_keys.get(&own_k4) {
            echoes.push(Disclosure {
                key_ref: own_k4,
                material: k.material().clone(),
            });
        }
        echoes.sort_by_key(|d| d.key_ref);
        self.state.echoes = echoes.clone();
        let payload = Payload::KcVerify {
            calibrations,
            endpoint_checks: checks,
            echoes,
        };
        self.send(Step::KcVerify, payload, 6, now, env, out);
    }

    fn next_leader(&self) -> NodeId {
        let n = self.cfg.graph.node_count();
        let mut votes: BTreeMap<NodeId, BTreeMap<&Bits, BTreeSet<NodeId>>> = BTreeMap::new();
        for d in &self.state.echoes {
            votes
                .entry(d.key_ref.owner)
                .or_default()
                .entry(&d.material)
                .or_default()
                .insert(self.id);
        }
        for r in &self.state.inbox {
            if !r.provisional() {
                continue;
            }
            if let Payload::KcVerify { echoes, .. } = &r.msg.payload {
                for d in echoes {
                    if d.key_ref.view == self.state.view && d.key_ref.step_index == 4 {
                        votes
                            .entry(d.key_ref.owner)
                            .or_default()
                            .entry(&d.material)
                            .or_default()
                            .insert(r.msg.source);
                    }
                }
            }
        }
        let keys: BTreeMap<NodeId, Bits> = votes
            .into_iter()
            .filter_map(|(owner, by_value)| {
                by_value
                    .into_iter()
                    .find(|(_, reporters)| reporters.len() > self.cfg.f)
                    .map(|(m, _)| (owner, m.clone()))
            })
            .collect();
        elect_leader(
            self.state.view + 1,
            &keys,
            n,
            self.cfg.params.ts_key_len_bits,
            &self.cfg.seeds,
        )
    }

    /// End of frame: settle key distribution, elect, and move on when the
    /// view committed or f+1 verified view changes arrived. Returns whether
    /// the node entered the next view.
    fn close_view(&mut self, now: Tick, out: &mut StepOutput) -> bool {
        if self.state.committed.is_some() {
            self.settle_distribution(out);
        }
        let mut changers: BTreeSet<NodeId> = self
            .state
            .inbox
            .iter()
            .filter(|r| r.verified() && r.msg.step == Step::ViewChange)
            .map(|r| r.msg.source)
            .collect();
        if self.state.view_changing {
            changers.insert(self.id);
        }
        if self.state.committed.is_none() && changers.len() <= self.cfg.f {
            return false;
        }
        let leader = self.next_leader();
        let start = self.state.start + FRAME_SLOTS;
        self.enter_view(self.state.view + 1, start, leader, now, out);
        true
    }

    fn settle_distribution(&mut self, out: &mut StepOutput) {
        let proposal = self.state.proposal.clone().expect("committed");
        let view = self.state.view;
        let check_seed = self.cfg.seeds.endpoint_check(view);
        for plan in &proposal.plans {
            let src = plan.paths.source;
            let dst = plan.paths.target;
            let mut served = true;
            let mut segments = Vec::new();
            let mut exposed = BTreeSet::new();
            for (index, route) in plan.paths.paths.iter().enumerate() {
                let path = PathId {
                    demand: plan.demand,
                    index,
                };
                let Some(own) = self.state.calibrations.get(&path).copied() else {
                    served = false;
                    continue;
                };
                // Closures used for the calibration must verify now that
                // their signing keys are public.
                let verified = kc_transmit(route, &self.path_closures(path, true), plan.per_path_bits() as usize);
                let reports: Vec<Calibration> = self
                    .state
                    .inbox
                    .iter()
                    .filter(|r| r.provisional())
                    .filter_map(|r| match &r.msg.payload {
                        Payload::KcVerify { calibrations, .. } => Some(
                            calibrations
                                .iter()
                                .filter(|c| c.reporter == r.msg.source)
                                .copied()
                                .collect::<Vec<_>>(),
                        ),
                        _ => None,
                    })
                    .flatten()
                    .collect();
                if verified.as_ref().ok() != self.state.aggregates.get(&path)
                    || consistent_calibrations(&own, &reports) <= self.cfg.f
                {
                    served = false;
                    continue;
                }
                if self.id != src && self.id != dst {
                    continue;
                }
                let (peer, peer_role) = if self.id == src {
                    (dst, EndpointRole::Destination)
                } else {
                    (src, EndpointRole::Source)
                };
                let segment = self.state.link_segments.get(&path).cloned().unwrap_or_default();
                let mine = endpoint_check(path, EndpointRole::Source, &segment, check_seed).digest;
                let theirs = self.state.inbox.iter().filter(|r| r.provisional() && r.msg.source == peer).find_map(
                    |r| match &r.msg.payload {
                        Payload::KcVerify { endpoint_checks, .. } => endpoint_checks
                            .iter()
                            .find(|c| c.path == path && c.role == peer_role)
                            .map(|c| c.digest),
                        _ => None,
                    },
                );
                if theirs == Some(mine) {
                    segments.push(segment);
                } else {
                    let aggregate = &self.state.aggregates[&path];
                    segments.push(bidirectional_segment(&segment, aggregate));
                    exposed.insert(index);
                    out.events.push(ReplicaEvent::KcMismatch { view, path });
                }
            }
            if served {
                self.book.record_served(plan.demand, plan.total_bits());
                out.events.push(ReplicaEvent::DemandServed {
                    view,
                    demand: plan.demand,
                    bits: plan.total_bits(),
                });
                if self.id == src || self.id == dst {
                    out.events.push(ReplicaEvent::Endpoint(EndpointOutput {
                        view,
                        demand: plan.demand,
                        role: if self.id == src {
                            EndpointRole::Source
                        } else {
                            EndpointRole::Destination
                        },
                        segments,
                        exposed,
                    }));
                }
            } else {
                out.events.push(ReplicaEvent::DemandAborted {
                    view,
                    demand: plan.demand,
                });
            }
        }
    }

    fn enter_view(&mut self, view: u64, start: Tick, leader: NodeId, now: Tick, out: &mut StepOutput) {
        self.state.closed = true;
        let mut next = ViewState::new(view, start, leader);
        let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.future)
            .into_iter()
            .partition(|r| r.msg.view == view);
        next.inbox = mine;
        self.future = rest.into_iter().filter(|r| r.msg.view > view).collect();
        self.previous = Some(std::mem::replace(&mut self.state, next));
        // Nothing signed two views back can still arrive within Δ.
        let horizon = view.saturating_sub(2);
        self.disclosed.retain(|k, _| k.view >= horizon);
        self.own_keys.retain(|k, _| k.view >= horizon);
        out.events.push(ReplicaEvent::EnteredView {
            view,
            leader,
            at: now,
        });
    }
}
