//! Simulated QKD link key pools.
//!
//! Each link's key material is a ChaCha20 stream keyed by the pool's seed,
//! so both endpoints read identical bits for the same `(offset, length)`
//! without storing them. Consumption is strictly sequential and every
//! draw is tagged with its purpose in the ledger.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::Bits;
use crate::topology::Edge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    Consensus,
    Delivery,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyStoreError {
    #[error("a pool for link {0:?} already exists")]
    DuplicatePool(Edge),
    #[error("no pool for link {0:?}")]
    UnknownLink(Edge),
    #[error("insufficient key on link {edge:?}: requested {requested} bits, {available} available")]
    InsufficientKey {
        edge: Edge,
        requested: u64,
        available: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPool {
    edge: Edge,
    capacity_bits: u64,
    consumed_bits: u64,
    stream_seed: u64,
}

impl KeyPool {
    pub fn new(edge: Edge, capacity_bits: u64, stream_seed: u64) -> Self {
        Self {
            edge,
            capacity_bits,
            consumed_bits: 0,
            stream_seed,
        }
    }

    pub fn edge(&self) -> Edge {
        self.edge
    }

    pub fn capacity_bits(&self) -> u64 {
        self.capacity_bits
    }

    pub fn consumed_bits(&self) -> u64 {
        self.consumed_bits
    }

    pub fn available_bits(&self) -> u64 {
        self.capacity_bits - self.consumed_bits
    }

    /// Key material at `[offset, offset + length)`; a pure function of the
    /// stream seed.
    pub fn material(&self, offset_bits: u64, length_bits: u64) -> Bits {
        if length_bits == 0 {
            return Bits::new();
        }
        let first_byte = offset_bits / 8;
        let first_word = first_byte / 4;
        let lead_bits = (offset_bits - first_word * 32) as usize;
        let total_bits = lead_bits + length_bits as usize;
        let mut bytes = vec![0u8; total_bits.div_ceil(8)];
        let mut rng = ChaCha20Rng::seed_from_u64(self.stream_seed);
        rng.set_word_pos(u128::from(first_word));
        rng.fill_bytes(&mut bytes);
        Bits::from_bytes(&bytes, total_bits).slice(lead_bits, length_bits as usize)
    }

    fn take(&mut self, length_bits: u64) -> Result<KeyBlock, KeyStoreError> {
        if length_bits > self.available_bits() {
            return Err(KeyStoreError::InsufficientKey {
                edge: self.edge,
                requested: length_bits,
                available: self.available_bits(),
            });
        }
        let offset = self.consumed_bits;
        self.consumed_bits += length_bits;
        Ok(KeyBlock {
            edge: self.edge,
            offset_bits: offset,
            material: self.material(offset, length_bits),
        })
    }
}

/// A consumed slice of one link's key stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBlock {
    pub edge: Edge,
    pub offset_bits: u64,
    pub material: Bits,
}

impl KeyBlock {
    pub fn length_bits(&self) -> u64 {
        self.material.len() as u64
    }

    pub fn end_bits(&self) -> u64 {
        self.offset_bits + self.length_bits()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumptionLedger {
    per_edge: BTreeMap<Edge, BTreeMap<Purpose, u64>>,
}

impl ConsumptionLedger {
    fn record(&mut self, edge: Edge, purpose: Purpose, bits: u64) {
        *self
            .per_edge
            .entry(edge)
            .or_default()
            .entry(purpose)
            .or_default() += bits;
    }

    pub fn edge_total(&self, edge: Edge, purpose: Purpose) -> u64 {
        self.per_edge
            .get(&edge)
            .and_then(|m| m.get(&purpose))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, purpose: Purpose) -> u64 {
        self.per_edge
            .values()
            .filter_map(|m| m.get(&purpose))
            .sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.total(Purpose::Consensus) + self.total(Purpose::Delivery)
    }
}

/// All link pools of a network plus the consumption ledger.
#[derive(Debug, Clone, Default)]
pub struct KeyStore {
    pools: BTreeMap<Edge, KeyPool>,
    ledger: ConsumptionLedger,
}

impl KeyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn provision(
        &mut self,
        edge: Edge,
        capacity_bits: u64,
        seed: u64,
    ) -> Result<&KeyPool, KeyStoreError> {
        if self.pools.contains_key(&edge) {
            return Err(KeyStoreError::DuplicatePool(edge));
        }
        Ok(self
            .pools
            .entry(edge)
            .or_insert_with(|| KeyPool::new(edge, capacity_bits, seed)))
    }

    pub fn pool(&self, edge: Edge) -> Option<&KeyPool> {
        self.pools.get(&edge)
    }

    pub fn pools(&self) -> impl Iterator<Item = &KeyPool> {
        self.pools.values()
    }

    pub fn available(&self, edge: Edge) -> u64 {
        self.pools.get(&edge).map_or(0, KeyPool::available_bits)
    }

    pub fn consume(
        &mut self,
        edge: Edge,
        length_bits: u64,
        purpose: Purpose,
    ) -> Result<KeyBlock, KeyStoreError> {
        let pool = self
            .pools
            .get_mut(&edge)
            .ok_or(KeyStoreError::UnknownLink(edge))?;
        let block = pool.take(length_bits)?;
        if length_bits > 0 {
            self.ledger.record(edge, purpose, length_bits);
        }
        Ok(block)
    }

    /// Draws `length_bits` from every listed link, or from none of them.
    pub fn consume_all(
        &mut self,
        edges: &[Edge],
        length_bits: u64,
        purpose: Purpose,
    ) -> Result<Vec<KeyBlock>, KeyStoreError> {
        for &e in edges {
            let available = self.available(e);
            if !self.pools.contains_key(&e) {
                return Err(KeyStoreError::UnknownLink(e));
            }
            if available < length_bits {
                return Err(KeyStoreError::InsufficientKey {
                    edge: e,
                    requested: length_bits,
                    available,
                });
            }
        }
        edges
            .iter()
            .map(|&e| self.consume(e, length_bits, purpose))
            .collect()
    }

    pub fn ledger(&self) -> &ConsumptionLedger {
        &self.ledger
    }

    pub fn consumed_bits(&self) -> u64 {
        self.pools.values().map(KeyPool::consumed_bits).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TEN_MB: u64 = 10_000_000;

    #[test]
    fn provision_ten_megabit_pool() {
        let mut store = KeyStore::new();
        let pool = store.provision(Edge::new(0, 1), TEN_MB, 7).unwrap();
        assert_eq!(pool.available_bits(), TEN_MB);
        assert_eq!(pool.consumed_bits(), 0);
        assert_eq!(
            store.provision(Edge::new(1, 0), TEN_MB, 7),
            Err(KeyStoreError::DuplicatePool(Edge::new(0, 1)))
        );
    }

    #[test]
    fn empty_pool_rejects_consumption() {
        let mut store = KeyStore::new();
        store.provision(Edge::new(0, 1), 0, 1).unwrap();
        assert!(matches!(
            store.consume(Edge::new(0, 1), 1, Purpose::Delivery),
            Err(KeyStoreError::InsufficientKey { .. })
        ));
    }

    #[test]
    fn both_endpoints_read_identical_material() {
        let a = KeyPool::new(Edge::new(0, 1), 1024, 99);
        let b = KeyPool::new(Edge::new(1, 0), 1024, 99);
        assert_eq!(a.material(0, 128), b.material(0, 128));
        assert_eq!(a.material(0, 128).len(), 128);
    }

    #[test]
    fn consume_tracks_remaining_and_ledger() {
        let mut store = KeyStore::new();
        let e = Edge::new(2, 3);
        store.provision(e, TEN_MB, 3).unwrap();
        let block = store.consume(e, 300_000, Purpose::Delivery).unwrap();
        assert_eq!(block.length_bits(), 300_000);
        assert_eq!(store.available(e), 9_700_000);
        assert_eq!(store.ledger().total(Purpose::Delivery), 300_000);

        let empty = store.consume(e, 0, Purpose::Consensus).unwrap();
        assert!(empty.material.is_empty());
        assert_eq!(store.available(e), 9_700_000);
        assert_eq!(store.ledger().total(Purpose::Consensus), 0);

        assert!(matches!(
            store.consume(e, 9_700_001, Purpose::Delivery),
            Err(KeyStoreError::InsufficientKey { .. })
        ));
    }

    #[test]
    fn consume_all_is_atomic() {
        let mut store = KeyStore::new();
        store.provision(Edge::new(0, 1), 100, 1).unwrap();
        store.provision(Edge::new(0, 2), 10, 2).unwrap();
        let err = store.consume_all(&[Edge::new(0, 1), Edge::new(0, 2)], 50, Purpose::Consensus);
        assert!(err.is_err());
        assert_eq!(store.available(Edge::new(0, 1)), 100);
    }

    proptest! {
        #[test]
        fn blocks_never_overlap_and_ledger_conserves(
            draws in proptest::collection::vec((0u64..400, any::<bool>()), 1..40)
        ) {
            let mut store = KeyStore::new();
            let e = Edge::new(0, 1);
            store.provision(e, 5_000, 42).unwrap();
            let mut blocks: Vec<KeyBlock> = Vec::new();
            for (len, consensus) in draws {
                let purpose = if consensus { Purpose::Consensus } else { Purpose::Delivery };
                if let Ok(b) = store.consume(e, len, purpose) {
                    blocks.push(b);
                }
            }
            for (i, a) in blocks.iter().enumerate() {
                for b in &blocks[i + 1..] {
                    prop_assert!(a.end_bits() <= b.offset_bits || b.end_bits() <= a.offset_bits
                        || a.length_bits() == 0 || b.length_bits() == 0);
                }
                // Material at an unaligned offset equals the slice of a
                // longer read from zero.
                let pool = store.pool(e).unwrap();
                let whole = pool.material(0, a.end_bits());
                prop_assert_eq!(&a.material, &whole.slice(a.offset_bits as usize, a.length_bits() as usize));
            }
            prop_assert_eq!(store.ledger().grand_total(), store.consumed_bits());
        }
    }
}
