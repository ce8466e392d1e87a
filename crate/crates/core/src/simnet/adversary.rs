//! Scripted Byzantine deviations applied to what a faulty node's own
//! protocol logic wants to send.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bits::Bits;
use crate::consensus::{Demand, DemandId, Payload, Plan, ProtocolMessage, Step};
use crate::crypto::{ts_sign, SecurityParams, TsKey};
use crate::scenario::Behavior;
use crate::topology::{max_disjoint_paths, Graph, NodeId};

/// Demand id used for requirements no node registered.
pub const FORGED_DEMAND: DemandId = DemandId(usize::MAX >> 1);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recipients {
    All,
    Only(Vec<NodeId>),
}

#[derive(Debug, Clone)]
pub struct Outbound {
    pub msg: ProtocolMessage,
    pub to: Recipients,
    /// Ticks until delivery; honest traffic uses 1.
    pub delay: u64,
}

impl Outbound {
    pub fn broadcast(msg: ProtocolMessage) -> Self {
        Self {
            msg,
            to: Recipients::All,
            delay: 1,
        }
    }
}

/// What the adversary can reach: the topology, its own signing keys and a
/// seeded coin.
pub struct AdversaryCtx<'a> {
    pub graph: &'a Graph,
    pub honest: &'a [NodeId],
    pub params: &'a SecurityParams,
    pub rng: &'a mut ChaCha8Rng,
    pub key: &'a dyn Fn(&ProtocolMessage) -> Option<TsKey>,
}

/// Re-signs `msg` after its payload changed, with the key that signed it.
fn resign(msg: &mut ProtocolMessage, ctx: &AdversaryCtx<'_>) {
    if let Some(key) = (ctx.key)(msg) {
        let key = TsKey::new(key.key_ref(), key.material().clone());
        if let Ok(ts) = ts_sign(&key, &msg.signed_bytes(), msg.ts.signed_at, ctx.params) {
            msg.ts = ts;
        }
    }
}

fn in_views(views: &Option<Vec<u64>>, view: u64) -> bool {
    views.as_ref().is_none_or(|v| v.contains(&view))
}

/// Transforms the outbound traffic of Byzantine `node` at frame slot
/// `slot` of its current view.
pub fn adversary_act(
    script: &[Behavior],
    node: NodeId,
    slot: u64,
    msgs: Vec<ProtocolMessage>,
    ctx: &mut AdversaryCtx<'_>,
) -> Vec<Outbound> {
    let mut out: Vec<Outbound> = msgs.into_iter().map(Outbound::broadcast).collect();
    for behavior in script {
        out = match behavior {
            Behavior::EquivocatePropose { views } => out
                .into_iter()
                .flat_map(|o| {
                    if o.msg.step == Step::Propose && in_views(views, o.msg.view) {
                        equivocate(o, node, ctx)
                    } else {
                        vec![o]
                    }
                })
                .collect(),
            Behavior::Withhold { from_slot, views } => out
                .into_iter()
                .filter(|o| !(slot >= *from_slot && in_views(views, o.msg.view)))
                .collect(),
            Behavior::DelayBeyondDelta { extra_ticks } => out
                .into_iter()
                .map(|o| Outbound {
                    delay: o.delay + extra_ticks,
                    ..o
                })
                .collect(),
            Behavior::Eavesdrop | Behavior::ResourceContention { .. } => out,
            Behavior::ForgedRequirement { dst, amount_bits } => out
                .into_iter()
                .map(|mut o| {
                    if forge_requirement(&mut o.msg, node, *dst, *amount_bits, ctx.graph) {
                        resign(&mut o.msg, ctx);
                    }
                    o
                })
                .collect(),
            Behavior::ForgedRoute => out
                .into_iter()
                .map(|mut o| {
                    if forge_route(&mut o.msg, ctx.graph) {
                        resign(&mut o.msg, ctx);
                    }
                    o
                })
                .collect(),
            Behavior::TamperKc => out
                .into_iter()
                .map(|mut o| {
                    if let Payload::Commit { closures, .. } = &mut o.msg.payload {
                        if let Some(c) = closures.first_mut().filter(|c| !c.material.is_empty()) {
                            c.material.flip(0);
                            resign(&mut o.msg, ctx);
                        }
                    }
                    o
                })
                .collect(),
            Behavior::ForgeTsAttempt => {
                let mut extra = Vec::new();
                if let Some(&victim) = ctx.honest.first() {
                    for o in &out {
                        if matches!(o.msg.step, Step::Vote | Step::ViewChange) {
                            extra.push(Outbound::broadcast(forge(&o.msg, victim, ctx)));
                        }
                    }
                }
                out.extend(extra);
                out
            }
        };
    }
    out
}

fn equivocate(o: Outbound, node: NodeId, ctx: &mut AdversaryCtx<'_>) -> Vec<Outbound> {
    let Payload::Propose { proposal } = &o.msg.payload else {
        return vec![o];
    };
    let mut alt = proposal.clone();
    if alt.plans.pop().is_none() {
        return vec![o];
    }
    alt.demands.pop();
    let mut second = o.msg.clone();
    second.payload = Payload::Propose { proposal: alt };
    resign(&mut second, ctx);
    let others: Vec<NodeId> = (0..ctx.graph.node_count()).filter(|&n| n != node).collect();
    let (a, b) = others.split_at(others.len() / 2);
    vec![
        Outbound {
            to: Recipients::Only(a.to_vec()),
            ..o
        },
        Outbound {
            msg: second,
            to: Recipients::Only(b.to_vec()),
            delay: 1,
        },
    ]
}

fn forge_requirement(
    msg: &mut ProtocolMessage,
    node: NodeId,
    dst: NodeId,
    amount_bits: u64,
    g: &Graph,
) -> bool {
    let Payload::Propose { proposal } = &mut msg.payload else {
        return false;
    };
    let Ok(paths) = max_disjoint_paths(g, node, dst) else {
        return false;
    };
    let beta = paths.len().max(1) as u64;
    let per_path = amount_bits.div_ceil(beta);
    proposal.demands.push(Demand {
        id: FORGED_DEMAND,
        src: node,
        dst,
        amount_bits: per_path * beta,
    });
    proposal.plans.push(Plan {
        demand: FORGED_DEMAND,
        amounts: vec![per_path; paths.len()],
        paths,
    });
    true
}

fn forge_route(msg: &mut ProtocolMessage, g: &Graph) -> bool {
    let Payload::Propose { proposal } = &mut msg.payload else {
        return false;
    };
    let Some(plan) = proposal.plans.first_mut() else {
        return false;
    };
    let (s, t) = (plan.paths.source, plan.paths.target);
    let fake = if !g.has_edge(s, t) {
        vec![s, t]
    } else {
        match (0..g.node_count()).find(|&x| x != s && x != t && !g.has_edge(s, x)) {
            Some(x) => vec![s, x, t],
            None => return false,
        }
    };
    plan.paths.paths[0] = fake;
    true
}

/// A copy of `msg` claiming `victim` as its source, tagged with random
/// bits in place of the victim's unknown key.
fn forge(msg: &ProtocolMessage, victim: NodeId, ctx: &mut AdversaryCtx<'_>) -> ProtocolMessage {
    let mut m = msg.clone();
    m.source = victim;
    m.disclosed.clear();
    m.ts.signer = victim;
    m.ts.key_ref.owner = victim;
    let omega = ctx.params.omega as usize;
    m.ts.tag = Bits::from_u64(ctx.rng.gen::<u64>() >> (64 - omega), omega);
    m
}
