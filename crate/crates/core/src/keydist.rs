//! End-to-end key distribution along committed paths.
//!
//! Each internal node of a path publishes a key closure, the XOR of its
//! in-link and out-link blocks. XOR-ing every closure telescopes to
//! `first_link ^ last_link`, so the destination recovers the source's
//! first-link block as `aggregate ^ last_link`. Per-path segments are
//! concatenated in path order and compressed by the leaked fraction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::Bits;
use crate::consensus::DemandId;
use crate::crypto::{digest64, privacy_amplify, SecurityParams};
use crate::keystore::KeyBlock;
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathId {
    pub demand: DemandId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyClosure {
    pub node: NodeId,
    pub path: PathId,
    pub material: Bits,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyDistError {
    #[error("blocks differ in length: {0} vs {1} bits")]
    LengthMismatch(usize, usize),
    #[error("no closure from internal node {0}")]
    MissingClosure(NodeId),
    #[error("two closures from node {0}")]
    DuplicateClosure(NodeId),
    #[error("closure from node {0}, which is not internal to the path")]
    UnexpectedClosure(NodeId),
    #[error("bidirectional repair still disagrees on path {0}")]
    RepairFailed(usize),
}

pub fn make_key_closure(
    node: NodeId,
    path: PathId,
    in_block: &KeyBlock,
    out_block: &KeyBlock,
) -> Result<KeyClosure, KeyDistError> {
    if in_block.material.len() != out_block.material.len() {
        return Err(KeyDistError::LengthMismatch(
            in_block.material.len(),
            out_block.material.len(),
        ));
    }
    Ok(KeyClosure {
        node,
        path,
        material: in_block.material.xor(&out_block.material),
    })
}

/// XOR of the closures of every internal node of `route`, or `len` zero
/// bits for a direct link.
pub fn kc_transmit(route: &[NodeId], closures: &[KeyClosure], len: usize) -> Result<Bits, KeyDistError> {
    let internal: BTreeSet<NodeId> = route
        .get(1..route.len().saturating_sub(1))
        .unwrap_or(&[])
        .iter()
        .copied()
        .collect();
    let mut seen = BTreeSet::new();
    let mut acc = Bits::zeros(len);
    for c in closures {
        if !internal.contains(&c.node) {
            return Err(KeyDistError::UnexpectedClosure(c.node));
        }
        if !seen.insert(c.node) {
            return Err(KeyDistError::DuplicateClosure(c.node));
        }
        if c.material.len() != len {
            return Err(KeyDistError::LengthMismatch(c.material.len(), len));
        }
        acc.xor_assign(&c.material);
    }
    if let Some(&missing) = internal.difference(&seen).next() {
        return Err(KeyDistError::MissingClosure(missing));
    }
    Ok(acc)
}

/// A reporter's 64-bit digest of one path's aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calibration {
    pub path: PathId,
    pub digest: u64,
    pub reporter: NodeId,
}

pub fn calibrate(
    path: PathId,
    route: &[NodeId],
    closures: &[KeyClosure],
    len: usize,
    reporter: NodeId,
    pa_seed: u64,
) -> Result<Calibration, KeyDistError> {
    let aggregate = kc_transmit(route, closures, len)?;
    Ok(calibrate_aggregate(path, &aggregate, reporter, pa_seed))
}

pub fn calibrate_aggregate(path: PathId, aggregate: &Bits, reporter: NodeId, pa_seed: u64) -> Calibration {
    Calibration {
        path,
        digest: digest64(aggregate, pa_seed),
        reporter,
    }
}

/// Distinct reporters whose digest for `own.path` equals `own.digest`,
/// counting `own.reporter` itself.
pub fn consistent_calibrations(own: &Calibration, reports: &[Calibration]) -> usize {
    let mut agreeing: BTreeSet<NodeId> = reports
        .iter()
        .filter(|c| c.path == own.path && c.digest == own.digest)
        .map(|c| c.reporter)
        .collect();
    agreeing.insert(own.reporter);
    agreeing.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointRole {
    Source,
    Destination,
}

/// Digest an endpoint publishes of its segment so the peer can detect a
/// tampered transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointCheck {
    pub path: PathId,
    pub role: EndpointRole,
    pub digest: u64,
}

pub fn endpoint_check(path: PathId, role: EndpointRole, segment: &Bits, pa_seed: u64) -> EndpointCheck {
    EndpointCheck {
        path,
        role,
        digest: digest64(segment, pa_seed),
    }
}

/// Segment after rerunning the same closures in the opposite direction:
/// the endpoint XORs its own link block with what the peer's block
/// decodes to, which on both sides equals the public aggregate.
pub fn bidirectional_segment(own_segment: &Bits, aggregate: &Bits) -> Bits {
    let reverse = aggregate.xor(own_segment);
    own_segment.xor(&reverse)
}

/// Everything known about one path once KC-verify has closed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathResult {
    pub consistent_calibrations: usize,
    pub src_segment: Bits,
    pub dst_segment: Bits,
    pub aggregate: Bits,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreedSegments {
    pub src: Vec<Bits>,
    pub dst: Vec<Bits>,
    pub exposed: BTreeSet<usize>,
}

/// Paths whose endpoints disagree, to be repaired once in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub paths: Vec<usize>,
}

impl RecoveryPlan {
    pub fn execute(&self, results: &[PathResult]) -> Result<AgreedSegments, KeyDistError> {
        let mut src: Vec<Bits> = results.iter().map(|r| r.src_segment.clone()).collect();
        let mut dst: Vec<Bits> = results.iter().map(|r| r.dst_segment.clone()).collect();
        for &i in &self.paths {
            let r = &results[i];
            src[i] = bidirectional_segment(&r.src_segment, &r.aggregate);
            dst[i] = bidirectional_segment(&r.dst_segment, &r.aggregate);
            if src[i] != dst[i] {
                return Err(KeyDistError::RepairFailed(i));
            }
        }
        Ok(AgreedSegments {
            src,
            dst,
            exposed: self.paths.iter().copied().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finalization {
    Agreed(AgreedSegments),
    Recover(RecoveryPlan),
    Aborted { path: usize, consistent: usize },
}

pub fn finalize_demand(results: &[PathResult], f: usize) -> Finalization {
    if let Some((path, r)) = results
        .iter()
        .enumerate()
        .find(|(_, r)| r.consistent_calibrations < f + 1)
    {
        return Finalization::Aborted {
            path,
            consistent: r.consistent_calibrations,
        };
    }
    let mismatched: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.src_segment != r.dst_segment)
        .map(|(i, _)| i)
        .collect();
    if mismatched.is_empty() {
        Finalization::Agreed(AgreedSegments {
            src: results.iter().map(|r| r.src_segment.clone()).collect(),
            dst: results.iter().map(|r| r.dst_segment.clone()).collect(),
            exposed: BTreeSet::new(),
        })
    } else {
        Finalization::Recover(RecoveryPlan { paths: mismatched })
    }
}

/// Compromised paths over all paths of one delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakedFraction {
    pub leaked: usize,
    pub paths: usize,
}

impl LeakedFraction {
    pub fn new(leaked: usize, paths: usize) -> Self {
        assert!(paths > 0 && leaked <= paths);
        Self { leaked, paths }
    }

    pub fn total() -> Self {
        Self { leaked: 1, paths: 1 }
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.leaked as f64 / self.paths as f64
    }

    /// `floor(bits * (1 - leaked / paths))`.
    pub fn retained(&self, bits: usize) -> usize {
        bits * (self.paths - self.leaked) / self.paths
    }
}

pub fn final_key_len(pre_pa_len: usize, leaked: LeakedFraction, params: &SecurityParams) -> usize {
    leaked
        .retained(pre_pa_len)
        .saturating_sub(params.pa_margin_bits())
}

/// Privacy amplification of the concatenated segments; `None` when
/// nothing survives the compression.
pub fn post_process(
    pre_pa: &Bits,
    leaked: LeakedFraction,
    pa_seed: u64,
    params: &SecurityParams,
) -> Option<Bits> {
    let out = final_key_len(pre_pa.len(), leaked, params);
    if out == 0 {
        return None;
    }
    Some(privacy_amplify(pre_pa, out, pa_seed).expect("output shorter than input"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndToEndKey {
    pub demand: DemandId,
    pub src: NodeId,
    pub dst: NodeId,
    pub view: u64,
    pub pre_pa_bits: usize,
    pub leaked: LeakedFraction,
    pub exposed: BTreeSet<usize>,
    pub final_key: Option<Bits>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Edge;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: PathId = PathId {
        demand: DemandId(0),
        index: 0,
    };

    fn block(a: NodeId, b: NodeId, material: Bits) -> KeyBlock {
        KeyBlock {
            edge: Edge::new(a, b),
            offset_bits: 0,
            material,
        }
    }

    fn random_bits(rng: &mut impl Rng, len: usize) -> Bits {
        Bits::from_bools(&(0..len).map(|_| rng.gen()).collect::<Vec<bool>>())
    }

    fn closures_for(route: &[NodeId], links: &[Bits]) -> Vec<KeyClosure> {
        (1..route.len() - 1)
            .map(|i| {
                make_key_closure(
                    route[i],
                    P,
                    &block(route[i - 1], route[i], links[i - 1].clone()),
                    &block(route[i], route[i + 1], links[i].clone()),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn closure_arithmetic() {
        let a = block(0, 1, Bits::from_u64(0xA5, 8));
        let b = block(1, 2, Bits::from_u64(0x5A, 8));
        let c = make_key_closure(1, P, &a, &b).unwrap();
        assert_eq!(c.material, Bits::from_u64(0xFF, 8));
        assert_eq!(make_key_closure(1, P, &b, &a).unwrap().material, c.material);
        assert_eq!(make_key_closure(1, P, &a, &a).unwrap().material, Bits::zeros(8));
        let short = block(1, 2, Bits::zeros(7));
        assert!(make_key_closure(1, P, &a, &short).is_err());
    }

    #[test]
    fn direct_link_has_empty_aggregate() {
        assert_eq!(kc_transmit(&[3, 4], &[], 16).unwrap(), Bits::zeros(16));
    }

    #[test]
    fn three_node_path_recovers_first_link() {
        let k1 = Bits::from_u64(0x1234, 16);
        let k2 = Bits::from_u64(0xBEEF, 16);
        let route = [0, 1, 2];
        let agg = kc_transmit(&route, &closures_for(&route, &[k1.clone(), k2.clone()]), 16).unwrap();
        assert_eq!(agg, k1.xor(&k2));
        assert_eq!(agg.xor(&k2), k1);
    }

    #[test]
    fn closure_set_errors() {
        let route = [0, 1, 2, 3];
        let links = vec![Bits::zeros(4); 3];
        let mut cs = closures_for(&route, &links);
        let extra = cs[0].clone();
        cs.push(extra);
        assert_eq!(kc_transmit(&route, &cs, 4), Err(KeyDistError::DuplicateClosure(1)));
        assert_eq!(
            kc_transmit(&route, &cs[..1], 4),
            Err(KeyDistError::MissingClosure(2))
        );
        let mut stray = cs[0].clone();
        stray.node = 3;
        assert_eq!(kc_transmit(&route, &[stray], 4), Err(KeyDistError::UnexpectedClosure(3)));
    }

    proptest! {
        #[test]
        fn telescoping(seed in any::<u64>(), hops in 1usize..=8, len in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let route: Vec<NodeId> = (0..=hops).collect();
            let links: Vec<Bits> = (0..hops).map(|_| random_bits(&mut rng, len)).collect();
            let agg = kc_transmit(&route, &closures_for(&route, &links), len).unwrap();
            prop_assert_eq!(links[0].xor(&agg), links[hops - 1].clone());
        }
    }

    #[test]
    fn calibration_determinism_and_threshold() {
        let route = [0, 1, 2];
        let links = [Bits::from_u64(7, 8), Bits::from_u64(9, 8)];
        let cs = closures_for(&route, &links);
        let a = calibrate(P, &route, &cs, 8, 5, 11).unwrap();
        let b = calibrate(P, &route, &cs, 8, 6, 11).unwrap();
        assert_eq!(a.digest, b.digest);
        let mut tampered = cs.clone();
        tampered[0].material.flip(0);
        let bad = calibrate(P, &route, &tampered, 8, 7, 11).unwrap();
        assert_ne!(a.digest, bad.digest);
        // f = 1 among 4 reporters: own + one agreeing report is f + 1.
        assert_eq!(consistent_calibrations(&a, &[b, bad]), 2);
    }

    /// Flipping one aggregate bit collides under an 8-bit Toeplitz hash
    /// with probability at most 2^-8.
    #[test]
    fn flipped_bit_collision_rate_at_toy_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 20_000u32;
        let mut hits = 0u32;
        for _ in 0..trials {
            let agg = random_bits(&mut rng, 64);
            let mut flipped = agg.clone();
            flipped.flip(rng.gen_range(0..64));
            let seed = rng.gen();
            if privacy_amplify(&agg, 8, seed).unwrap() == privacy_amplify(&flipped, 8, seed).unwrap() {
                hits += 1;
            }
        }
        let q = 1.0 / 256.0;
        let bound = trials as f64 * q + 3.0 * (trials as f64 * q * (1.0 - q)).sqrt();
        assert!((hits as f64) <= bound, "{hits} > {bound}");
    }

    fn honest_result(rng: &mut impl Rng, len: usize, consistent: usize) -> PathResult {
        let first = random_bits(rng, len);
        let last = random_bits(rng, len);
        let aggregate = first.xor(&last);
        PathResult {
            consistent_calibrations: consistent,
            src_segment: first.clone(),
            dst_segment: aggregate.xor(&last),
            aggregate,
        }
    }

    #[test]
    fn agreed_demand_compresses_by_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let results = vec![honest_result(&mut rng, 1000, 2), honest_result(&mut rng, 1000, 3)];
        let Finalization::Agreed(seg) = finalize_demand(&results, 1) else {
            panic!("expected agreement");
        };
        assert_eq!(seg.src, seg.dst);
        let params = SecurityParams::default();
        let pre = Bits::concat(&seg.src);
        let key = post_process(&pre, LeakedFraction::new(1, 2), 5, &params).unwrap();
        assert_eq!(key.len(), 1000 - 34);
        assert_eq!(key, post_process(&Bits::concat(&seg.dst), LeakedFraction::new(1, 2), 5, &params).unwrap());
    }

    #[test]
    fn tampered_path_is_repaired_and_exposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut results: Vec<PathResult> = (0..4).map(|_| honest_result(&mut rng, 256, 4)).collect();
        // A relay flipped a closure bit on path 2: the public aggregate and
        // the destination's decoding both carry the flip.
        results[2].aggregate.flip(17);
        results[2].dst_segment.flip(17);
        let Finalization::Recover(plan) = finalize_demand(&results, 3) else {
            panic!("expected recovery");
        };
        assert_eq!(plan.paths, vec![2]);
        let seg = plan.execute(&results).unwrap();
        assert_eq!(seg.src, seg.dst);
        assert_eq!(seg.exposed, BTreeSet::from([2]));
        assert_eq!(seg.src[2], results[2].aggregate);
    }

    #[test]
    fn too_few_calibrations_abort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let results = vec![honest_result(&mut rng, 8, 3), honest_result(&mut rng, 8, 1)];
        assert_eq!(
            finalize_demand(&results, 1),
            Finalization::Aborted { path: 1, consistent: 1 }
        );
    }

    #[test]
    fn post_process_lengths() {
        let params = SecurityParams::default();
        let pre = Bits::zeros(500_000);
        assert_eq!(post_process(&pre, LeakedFraction::new(0, 4), 1, &params).unwrap().len(), 500_000 - 34);
        assert!(post_process(&pre, LeakedFraction::new(4, 4), 1, &params).is_none());
        let quarter = LeakedFraction::new(1, 4);
        let expected = 500_000 * 3 / 4 - (1e10f64).log2().ceil() as usize;
        assert_eq!(final_key_len(500_000, quarter, &params), expected);
        assert!(post_process(&Bits::zeros(30), LeakedFraction::new(0, 1), 1, &params).is_none());
    }
}
