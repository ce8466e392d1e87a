//! Information-theoretic primitives.

mod auth;
mod encoding;
mod gf2;
mod toeplitz;
mod tsig;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use auth::{auth_key_bits, auth_tag, forgery_bound};
pub use encoding::Encoder;
pub use gf2::BinaryField;
pub use toeplitz::{digest64, privacy_amplify, toeplitz_seed_bits};
pub use tsig::{
    ts_keygen, ts_share_bits, ts_sign, ts_verify, ts_verify_with, KeyRef, Rejection, TemporarySignature, TsKey,
    VerifyContext,
};

use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CryptoError {
    #[error("requested {requested} output bits from a {available}-bit input")]
    OutputTooLong { requested: usize, available: usize },
    #[error("key has {got} bits, {needed} required")]
    KeyTooShort { needed: usize, got: usize },
    #[error("message of {blocks} blocks exceeds the forgery bound at omega={omega}")]
    MessageTooLong { blocks: usize, omega: u32 },
    #[error("key {0:?} is already disclosed")]
    KeyDisclosed(KeyRef),
    #[error("node {0} has no neighbor links")]
    NoNeighbors(NodeId),
    #[error("neighbor block for link {link} has {got} bits, expected {expected}")]
    ShareLength { link: String, got: usize, expected: usize },
    #[error("invalid security parameters: {0}")]
    InvalidParams(String),
}

/// Security knobs shared by extraction, authentication and signatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    /// Privacy-amplification security bound.
    pub epsilon: f64,
    /// Authentication failure bound.
    pub epsilon_k: f64,
    /// Authenticator field degree, 1..=64.
    pub omega: u32,
    /// Temporary-signature key length `L`.
    pub ts_key_len_bits: usize,
}

impl Default for SecurityParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-10,
            epsilon_k: 1e-12,
            omega: 63,
            ts_key_len_bits: 128,
        }
    }
}

impl SecurityParams {
    pub fn validate(&self) -> Result<(), CryptoError> {
        let bad = |m: String| Err(CryptoError::InvalidParams(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} not in (0, 1)", self.epsilon));
        }
        if !(self.epsilon_k > 0.0 && self.epsilon_k < 1.0) {
            return bad(format!("epsilon_k {} not in (0, 1)", self.epsilon_k));
        }
        if !(1..=64).contains(&self.omega) {
            return bad(format!("omega {} not in 1..=64", self.omega));
        }
        if self.ts_key_len_bits < auth_key_bits(self) {
            return bad(format!(
                "ts_key_len_bits {} shorter than the {} bits one tag consumes",
                self.ts_key_len_bits,
                auth_key_bits(self)
            ));
        }
        Ok(())
    }

    /// Bits removed by privacy amplification beyond the leaked fraction:
    /// `ceil(log2(1 / epsilon))`.
    pub fn pa_margin_bits(&self) -> usize {
        (1.0 / self.epsilon).log2().ceil() as usize
    }
}

/// Public seeds for every extractor call, derived from one scenario seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSchedule {
    base: u64,
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum SeedDomain {
    TsKey = 1,
    Digest = 2,
    Election = 3,
    Calibration = 4,
    PostProcess = 5,
    LinkStream = 6,
    EndpointCheck = 7,
}

impl SeedSchedule {
    pub fn new(base: u64) -> Self {
        Self { base }
    }

    fn derive(&self, domain: SeedDomain, parts: &[u64]) -> u64 {
        let mut h = splitmix64(self.base ^ (domain as u64).wrapping_mul(0xA076_1D64_78BD_642F));
        for &p in parts {
            h = splitmix64(h ^ p);
        }
        h
    }

    pub fn ts_key(&self, view: u64, step_index: u8, owner: NodeId) -> u64 {
        self.derive(SeedDomain::TsKey, &[view, step_index as u64, owner as u64])
    }

    pub fn digest(&self) -> u64 {
        self.derive(SeedDomain::Digest, &[])
    }

    pub fn election(&self, view: u64) -> u64 {
        self.derive(SeedDomain::Election, &[view])
    }

    pub fn calibration(&self, view: u64) -> u64 {
        self.derive(SeedDomain::Calibration, &[view])
    }

    pub fn endpoint_check(&self, view: u64) -> u64 {
        self.derive(SeedDomain::EndpointCheck, &[view])
    }

    pub fn post_process(&self, view: u64, demand: u64) -> u64 {
        self.derive(SeedDomain::PostProcess, &[view, demand])
    }

    pub fn link_stream(&self, a: NodeId, b: NodeId) -> u64 {
        self.derive(SeedDomain::LinkStream, &[a as u64, b as u64])
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
