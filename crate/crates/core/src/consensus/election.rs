use std::collections::BTreeMap;

use crate::bits::Bits;
use crate::crypto::{digest64, SeedSchedule};
use crate::topology::NodeId;

/// Leader of `view`. View 0 is led by node 0. Later views hash the
/// quorum-echoed step-4 keys of the previous view, concatenated in node-id
/// order with `key_len` zero bits for every node without one, and reduce
/// the 64-bit result mod `n`. The input carries a 64-bit length prefix so an
/// all-zero round still varies with the view seed.
pub fn elect_leader(
    view: u64,
    echoed_keys: &BTreeMap<NodeId, Bits>,
    n: usize,
    key_len: usize,
    seeds: &SeedSchedule,
) -> NodeId {
    assert!(n > 0);
    if view == 0 {
        return 0;
    }
    let zeros = Bits::zeros(key_len);
    let len = Bits::from_u64((n * key_len) as u64, 64);
    let input = Bits::concat(
        std::iter::once(&len).chain((0..n).map(|i| echoed_keys.get(&i).unwrap_or(&zeros))),
    );
    (digest64(&input, seeds.election(view)) % n as u64) as NodeId
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::toeplitz_seed_bits;

    #[test]
    fn view_zero_is_node_zero() {
        assert_eq!(elect_leader(0, &BTreeMap::new(), 8, 128, &SeedSchedule::new(1)), 0);
    }

    #[test]
    fn same_inputs_same_leader() {
        let seeds = SeedSchedule::new(3);
        let keys: BTreeMap<_, _> = (0..8).map(|i| (i, toeplitz_seed_bits(i as u64, 128))).collect();
        let a = elect_leader(5, &keys, 8, 128, &seeds);
        let b = elect_leader(5, &keys.clone(), 8, 128, &seeds);
        assert_eq!(a, b);
        assert!(a < 8);
    }

    #[test]
    fn missing_keys_still_elect() {
        let seeds = SeedSchedule::new(3);
        let leaders: Vec<_> = (1..50)
            .map(|v| elect_leader(v, &BTreeMap::new(), 8, 128, &seeds))
            .collect();
        assert!(leaders.iter().any(|&l| l != leaders[0]));
    }
}
