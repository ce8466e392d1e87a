//! Wire format `<Step, M, e, TS(K), K_prev>_Source` and its canonical
//! encoding. The temporary signature covers everything except itself.

use serde::{Deserialize, Serialize};

use super::proposal::{Proposal, ProposalDigest};
use crate::bits::Bits;
use crate::crypto::{Encoder, KeyRef, TemporarySignature};
use crate::keydist::{Calibration, EndpointCheck, EndpointRole, KeyClosure};
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    Propose,
    Vote,
    Verify,
    Revote,
    RevoteVerify,
    Commit,
    KcVerify,
    ViewChange,
}

impl Step {
    fn code(self) -> u8 {
        self as u8
    }
}

/// A revealed temporary-signature key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Disclosure {
    pub key_ref: KeyRef,
    pub material: Bits,
}

/// Two leader messages for the same view carrying different proposals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equivocation {
    pub first: Box<ProtocolMessage>,
    pub second: Box<ProtocolMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Payload {
    Propose {
        proposal: Proposal,
    },
    /// Carries the leader message the vote refers to so every replica sees
    /// what the others were sent.
    Vote {
        approve: bool,
        proposal: Option<Box<ProtocolMessage>>,
    },
    Verify {
        digest: ProposalDigest,
    },
    Revote {
        digest: ProposalDigest,
        ts_pre: Option<TemporarySignature>,
    },
    RevoteVerify {
        digest: ProposalDigest,
    },
    Commit {
        digest: ProposalDigest,
        closures: Vec<KeyClosure>,
    },
    KcVerify {
        calibrations: Vec<Calibration>,
        endpoint_checks: Vec<EndpointCheck>,
        echoes: Vec<Disclosure>,
    },
    ViewChange {
        evidence: Option<Equivocation>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub step: Step,
    pub view: u64,
    pub source: NodeId,
    pub payload: Payload,
    pub disclosed: Vec<Disclosure>,
    pub ts: TemporarySignature,
}

impl ProtocolMessage {
    /// Bytes covered by the temporary signature.
    pub fn signing_bytes(
        step: Step,
        view: u64,
        source: NodeId,
        payload: &Payload,
        disclosed: &[Disclosure],
    ) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(step.code()).u64(view).usize(source);
        encode_payload(&mut enc, payload);
        enc.usize(disclosed.len());
        for d in disclosed {
            encode_key_ref(&mut enc, &d.key_ref);
            enc.bits(&d.material);
        }
        enc.finish()
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        Self::signing_bytes(self.step, self.view, self.source, &self.payload, &self.disclosed)
    }

    pub fn proposal(&self) -> Option<&Proposal> {
        match &self.payload {
            Payload::Propose { proposal } => Some(proposal),
            _ => None,
        }
    }

    pub fn encoded_len(&self) -> usize {
        let mut enc = Encoder::new();
        enc.bytes(&self.signed_bytes());
        encode_ts(&mut enc, &self.ts);
        enc.as_bytes().len()
    }
}

fn encode_key_ref(enc: &mut Encoder, k: &KeyRef) {
    enc.usize(k.owner).u64(k.view).u8(k.step_index);
}

fn encode_ts(enc: &mut Encoder, ts: &TemporarySignature) {
    enc.bits(&ts.tag).usize(ts.signer).u64(ts.signed_at.0);
    encode_key_ref(enc, &ts.key_ref);
}

fn encode_message(enc: &mut Encoder, m: &ProtocolMessage) {
    enc.bytes(&m.signed_bytes());
    encode_ts(enc, &m.ts);
}

fn encode_payload(enc: &mut Encoder, payload: &Payload) {
    match payload {
        Payload::Propose { proposal } => {
            enc.u8(0);
            proposal.encode(enc);
        }
        Payload::Vote { approve, proposal } => {
            enc.u8(1).bool(*approve).bool(proposal.is_some());
            if let Some(m) = proposal {
                encode_message(enc, m);
            }
        }
        Payload::Verify { digest } => {
            enc.u8(2).u64(digest.0);
        }
        Payload::Revote { digest, ts_pre } => {
            enc.u8(3).u64(digest.0).bool(ts_pre.is_some());
            if let Some(ts) = ts_pre {
                encode_ts(enc, ts);
            }
        }
        Payload::RevoteVerify { digest } => {
            enc.u8(4).u64(digest.0);
        }
        Payload::Commit { digest, closures } => {
            enc.u8(5).u64(digest.0).usize(closures.len());
            for c in closures {
                enc.usize(c.node)
                    .usize(c.path.demand.0)
                    .usize(c.path.index)
                    .bits(&c.material);
            }
        }
        Payload::KcVerify {
            calibrations,
            endpoint_checks,
            echoes,
        } => {
            enc.u8(6).usize(calibrations.len());
            for c in calibrations {
                enc.usize(c.path.demand.0)
                    .usize(c.path.index)
                    .u64(c.digest)
                    .usize(c.reporter);
            }
            enc.usize(endpoint_checks.len());
            for c in endpoint_checks {
                let role = match c.role {
                    EndpointRole::Source => 0,
                    EndpointRole::Destination => 1,
                };
                enc.usize(c.path.demand.0)
                    .usize(c.path.index)
                    .u8(role)
                    .u64(c.digest);
            }
            enc.usize(echoes.len());
            for d in echoes {
                encode_key_ref(enc, &d.key_ref);
                enc.bits(&d.material);
            }
        }
        Payload::ViewChange { evidence } => {
            enc.u8(7).bool(evidence.is_some());
            if let Some(e) = evidence {
                encode_message(enc, &e.first);
                encode_message(enc, &e.second);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Tick;

    fn ts() -> TemporarySignature {
        TemporarySignature {
            tag: Bits::zeros(63),
            signer: 2,
            signed_at: Tick(3),
            key_ref: KeyRef {
                owner: 2,
                view: 0,
                step_index: 2,
            },
        }
    }

    #[test]
    fn signing_bytes_cover_payload_and_disclosures() {
        let m = ProtocolMessage {
            step: Step::Verify,
            view: 0,
            source: 2,
            payload: Payload::Verify {
                digest: ProposalDigest(9),
            },
            disclosed: vec![],
            ts: ts(),
        };
        let mut other = m.clone();
        other.payload = Payload::Verify {
            digest: ProposalDigest(10),
        };
        assert_ne!(m.signed_bytes(), other.signed_bytes());
        let mut disclosing = m.clone();
        disclosing.disclosed.push(Disclosure {
            key_ref: KeyRef {
                owner: 2,
                view: 0,
                step_index: 1,
            },
            material: Bits::zeros(128),
        });
        assert_ne!(m.signed_bytes(), disclosing.signed_bytes());
        // Header: step code, view, source.
        assert_eq!(&m.signed_bytes()[..17], &[2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2]);
    }
}
