//! Temporary signatures: a one-time MAC whose key is disclosed one slot
//! after signing, so every node can check it once the key is public.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{auth_tag, privacy_amplify, CryptoError, SecurityParams};
use crate::bits::Bits;
use crate::keystore::KeyBlock;
use crate::time::Tick;
use crate::topology::{local_connectivity_avoiding, Graph, NodeId};

/// Names a temporary-signature key: `K_view^step_index` of `owner`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyRef {
    pub owner: NodeId,
    pub view: u64,
    pub step_index: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsKey {
    key_ref: KeyRef,
    material: Bits,
    disclosed_at: Option<Tick>,
}

impl TsKey {
    pub fn new(key_ref: KeyRef, material: Bits) -> Self {
        Self {
            key_ref,
            material,
            disclosed_at: None,
        }
    }

    /// A key as seen by a receiver of its disclosure.
    pub fn disclosed(key_ref: KeyRef, material: Bits, at: Tick) -> Self {
        Self {
            key_ref,
            material,
            disclosed_at: Some(at),
        }
    }

    pub fn key_ref(&self) -> KeyRef {
        self.key_ref
    }

    pub fn material(&self) -> &Bits {
        &self.material
    }

    pub fn is_disclosed(&self) -> bool {
        self.disclosed_at.is_some()
    }

    pub fn disclosed_at(&self) -> Option<Tick> {
        self.disclosed_at
    }

    /// Marks the key public. Returns false if it already was.
    pub fn disclose(&mut self, at: Tick) -> bool {
        if self.disclosed_at.is_some() {
            return false;
        }
        self.disclosed_at = Some(at);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporarySignature {
    pub tag: Bits,
    pub signer: NodeId,
    pub signed_at: Tick,
    pub key_ref: KeyRef,
}

/// Bits drawn from each of `neighbors` links for one key of `key_len`
/// bits: `ceil(L / (x - min(f, x - 1)))`.
pub fn ts_share_bits(neighbors: usize, f: usize, key_len: usize) -> usize {
    assert!(neighbors >= 1);
    let honest_floor = neighbors - f.min(neighbors - 1);
    key_len.div_ceil(honest_floor)
}

/// Builds `K_view^step_index` for `owner` from one fresh block per
/// incident link. Blocks are concatenated in neighbor-id order and
/// compressed to `L` bits with the public seed.
pub fn ts_keygen(
    owner: NodeId,
    view: u64,
    step_index: u8,
    neighbor_blocks: &[KeyBlock],
    f: usize,
    params: &SecurityParams,
    pa_seed: u64,
) -> Result<TsKey, CryptoError> {
    if neighbor_blocks.is_empty() {
        return Err(CryptoError::NoNeighbors(owner));
    }
    let share = ts_share_bits(neighbor_blocks.len(), f, params.ts_key_len_bits);
    let mut ordered: Vec<(NodeId, &KeyBlock)> = Vec::with_capacity(neighbor_blocks.len());
    for b in neighbor_blocks {
        let Some(nb) = b.edge.other(owner) else {
            return Err(CryptoError::ShareLength {
                link: format!("{:?} (not incident to {owner})", b.edge),
                got: b.material.len(),
                expected: share,
            });
        };
        if b.material.len() != share {
            return Err(CryptoError::ShareLength {
                link: format!("{:?}", b.edge),
                got: b.material.len(),
                expected: share,
            });
        }
        ordered.push((nb, b));
    }
    ordered.sort_by_key(|(nb, _)| *nb);
    if ordered.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(CryptoError::ShareLength {
            link: "duplicate neighbor link".into(),
            got: 0,
            expected: share,
        });
    }
    let raw = Bits::concat(ordered.iter().map(|(_, b)| &b.material));
    let material = privacy_amplify(&raw, params.ts_key_len_bits, pa_seed)?;
    Ok(TsKey::new(
        KeyRef {
            owner,
            view,
            step_index,
        },
        material,
    ))
}

pub fn ts_sign(
    key: &TsKey,
    message: &[u8],
    now: Tick,
    params: &SecurityParams,
) -> Result<TemporarySignature, CryptoError> {
    if key.is_disclosed() {
        return Err(CryptoError::KeyDisclosed(key.key_ref));
    }
    let (tag, _) = auth_tag(&key.material, message, params)?;
    Ok(TemporarySignature {
        tag,
        signer: key.key_ref.owner,
        signed_at: now,
        key_ref: key.key_ref,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    BadTag,
    InsufficientPaths,
    Expired,
    NotDisclosed,
    PrematureDisclosure,
}

/// Receiver-side facts needed to check a temporary signature.
#[derive(Debug, Clone, Copy)]
pub struct VerifyContext {
    pub verifier: NodeId,
    pub f: usize,
    pub received_at: Tick,
    /// Propagation bound in ticks.
    pub delta: u64,
}

/// Accepts iff the message arrived within Δ, the key was disclosed no
/// earlier than Δ after signing, the recomputed tag matches, and the
/// disclosure graph (the topology minus `missing` nodes) holds at least
/// `f + 1` disjoint signer-verifier paths.
pub fn ts_verify(
    sig: &TemporarySignature,
    message: &[u8],
    key: &TsKey,
    disclosure_graph: &Graph,
    missing: &BTreeSet<NodeId>,
    ctx: VerifyContext,
    params: &SecurityParams,
) -> Result<(), Rejection> {
    ts_verify_with(sig, message, key, ctx, params, || {
        local_connectivity_avoiding(disclosure_graph, sig.signer, ctx.verifier, missing)
    })
}

/// [`ts_verify`] with the disjoint-path count supplied by the caller, who
/// may have it cached. `disjoint_paths` is only consulted once the tag has
/// matched.
pub fn ts_verify_with(
    sig: &TemporarySignature,
    message: &[u8],
    key: &TsKey,
    ctx: VerifyContext,
    params: &SecurityParams,
    disjoint_paths: impl FnOnce() -> usize,
) -> Result<(), Rejection> {
    if ctx.received_at - sig.signed_at > ctx.delta {
        return Err(Rejection::Expired);
    }
    let Some(disclosed_at) = key.disclosed_at else {
        return Err(Rejection::NotDisclosed);
    };
    if disclosed_at < sig.signed_at + ctx.delta {
        return Err(Rejection::PrematureDisclosure);
    }
    if key.key_ref != sig.key_ref {
        return Err(Rejection::BadTag);
    }
    match auth_tag(&key.material, message, params) {
        Ok((tag, _)) if tag == sig.tag => {}
        _ => return Err(Rejection::BadTag),
    }
    if sig.signer != ctx.verifier {
        if disjoint_paths() < ctx.f + 1 {
            return Err(Rejection::InsufficientPaths);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystore::{KeyStore, Purpose};
    use crate::topology::Edge;

    fn blocks_for(store: &mut KeyStore, g: &Graph, owner: NodeId, share: u64) -> Vec<KeyBlock> {
        g.neighbors(owner)
            .iter()
            .map(|&nb| store.consume(Edge::new(owner, nb), share, Purpose::Consensus).unwrap())
            .collect()
    }

    fn provisioned(g: &Graph) -> KeyStore {
        let mut store = KeyStore::new();
        for (i, e) in g.edges().iter().enumerate() {
            store.provision(*e, 1_000_000, i as u64 + 1).unwrap();
        }
        store
    }

    #[test]
    fn share_sizes() {
        assert_eq!(ts_share_bits(4, 1, 1024), 342);
        assert_eq!(ts_share_bits(1, 0, 128), 128);
        assert_eq!(ts_share_bits(4, 3, 128), 128);
        assert_eq!(ts_share_bits(2, 5, 128), 128);
    }

    #[test]
    fn keygen_four_neighbors_draws_1368_bits() {
        let g = Graph::complete(5);
        let mut store = provisioned(&g);
        let params = SecurityParams {
            ts_key_len_bits: 1024,
            ..SecurityParams::default()
        };
        let share = ts_share_bits(4, 1, 1024) as u64;
        let blocks = blocks_for(&mut store, &g, 0, share);
        let key = ts_keygen(0, 0, 1, &blocks, 1, &params, 9).unwrap();
        assert_eq!(key.material().len(), 1024);
        assert_eq!(store.ledger().total(Purpose::Consensus), 1368);
    }

    #[test]
    fn keygen_single_neighbor() {
        let g = Graph::new(2, [(0, 1)]).unwrap();
        let mut store = provisioned(&g);
        let params = SecurityParams::default();
        let blocks = blocks_for(&mut store, &g, 0, 128);
        let key = ts_keygen(0, 0, 1, &blocks, 0, &params, 1).unwrap();
        // x - k = 1: the key is the link block itself.
        assert_eq!(key.material(), &blocks[0].material);
    }

    /// x = 3, f = 1, L = 8: one 4-bit share is known, the other two are
    /// searched exhaustively under each seed.
    #[test]
    fn one_known_share_does_not_pin_the_key() {
        let params = SecurityParams {
            ts_key_len_bits: 8,
            ..SecurityParams::default()
        };
        assert_eq!(ts_share_bits(3, 1, 8), 4);
        let block = |nb: NodeId, v: u64| KeyBlock {
            edge: Edge::new(0, nb),
            offset_bits: 0,
            material: Bits::from_u64(v, 4),
        };
        let seeds = 1024;
        let mut pinned = 0;
        let mut collisions = 0u64;
        for seed in 0..seeds {
            let mut counts = [0u32; 256];
            for unknown in 0..256u64 {
                let blocks = [block(1, 0b1011), block(2, unknown >> 4), block(3, unknown & 0xF)];
                let key = ts_keygen(0, 0, 1, &blocks, 1, &params, seed).unwrap();
                counts[key.material().read_u64(0, 8) as usize] += 1;
            }
            // An attacker's best guess succeeds with max / 256.
            if *counts.iter().max().unwrap() >= 128 {
                pinned += 1;
            }
            collisions += counts.iter().map(|&c| u64::from(c) * u64::from(c.saturating_sub(1))).sum::<u64>();
        }
        let pairs = seeds * 256 * 255;
        let rate = collisions as f64 / pairs as f64;
        assert!(rate <= 2.0 / 256.0, "collision rate {rate}");
        assert!(pinned as f64 / seeds as f64 <= 1.0 / 256.0, "{pinned} seeds pin the key");
    }

    #[test]
    fn keygen_rejects_wrong_share_length() {
        let g = Graph::complete(3);
        let mut store = provisioned(&g);
        let blocks = blocks_for(&mut store, &g, 0, 10);
        assert!(matches!(
            ts_keygen(0, 0, 1, &blocks, 1, &SecurityParams::default(), 0),
            Err(CryptoError::ShareLength { .. })
        ));
    }

    fn signed(params: &SecurityParams) -> (TsKey, TemporarySignature) {
        let key = TsKey::new(
            KeyRef {
                owner: 0,
                view: 0,
                step_index: 1,
            },
            crate::crypto::toeplitz_seed_bits(5, params.ts_key_len_bits),
        );
        let sig = ts_sign(&key, b"propose", Tick(10), params).unwrap();
        (key, sig)
    }

    fn ctx(verifier: NodeId, f: usize, received: u64) -> VerifyContext {
        VerifyContext {
            verifier,
            f,
            received_at: Tick(received),
            delta: 1,
        }
    }

    #[test]
    fn sign_then_verify_after_disclosure() {
        let params = SecurityParams::default();
        let (mut key, sig) = signed(&params);
        key.disclose(Tick(11));
        let g = Graph::ring(4);
        assert_eq!(
            ts_verify(&sig, b"propose", &key, &g, &BTreeSet::new(), ctx(2, 1, 11), &params),
            Ok(())
        );
    }

    #[test]
    fn late_delivery_is_untrusted() {
        let params = SecurityParams::default();
        let (mut key, sig) = signed(&params);
        key.disclose(Tick(11));
        let g = Graph::ring(4);
        assert_eq!(
            ts_verify(&sig, b"propose", &key, &g, &BTreeSet::new(), ctx(2, 1, 12), &params),
            Err(Rejection::Expired)
        );
    }

    #[test]
    fn signing_with_disclosed_key_rejected() {
        let params = SecurityParams::default();
        let (mut key, _) = signed(&params);
        key.disclose(Tick(11));
        assert!(matches!(
            ts_sign(&key, b"x", Tick(12), &params),
            Err(CryptoError::KeyDisclosed(_))
        ));
        assert!(!key.disclose(Tick(12)));
    }

    #[test]
    fn path_condition_and_tamper() {
        let params = SecurityParams::default();
        let (mut key, sig) = signed(&params);
        key.disclose(Tick(11));
        let g = Graph::ring(4);
        // Ring: two disjoint paths between 0 and 2; enough for f = 1.
        assert!(ts_verify(&sig, b"propose", &key, &g, &BTreeSet::new(), ctx(2, 1, 11), &params).is_ok());
        // One neighbor of the receiver missing leaves a single path.
        let missing: BTreeSet<NodeId> = [1].into();
        assert_eq!(
            ts_verify(&sig, b"propose", &key, &g, &missing, ctx(2, 1, 11), &params),
            Err(Rejection::InsufficientPaths)
        );
        assert_eq!(
            ts_verify(&sig, b"proposf", &key, &g, &BTreeSet::new(), ctx(2, 1, 11), &params),
            Err(Rejection::BadTag)
        );
    }

    #[test]
    fn premature_disclosure_rejected() {
        let params = SecurityParams::default();
        let (mut key, sig) = signed(&params);
        key.disclose(Tick(10));
        let g = Graph::ring(4);
        assert_eq!(
            ts_verify(&sig, b"propose", &key, &g, &BTreeSet::new(), ctx(2, 1, 11), &params),
            Err(Rejection::PrematureDisclosure)
        );
    }
}
