//! One-time polynomial-evaluation MAC over GF(2^omega).
//!
//! Key layout: the first `omega` bits are the evaluation point `k`, the
//! next `omega` bits the one-time pad `r`. The message is split into
//! `omega`-bit blocks `m_1..m_l` (last block zero-padded) and
//!
//! ```text
//! tag = ((..((m_1 k + m_2) k + ..) + m_l) k + len) k  XOR  r
//! ```
//!
//! where `len` is the message bit length reduced into the field. Two
//! distinct messages of at most `l` blocks collide for at most `l + 1`
//! values of `k`, so a forgery succeeds with probability `<= (l + 1) / 2^omega`.
//! Every tag consumes exactly `2 * omega` key bits regardless of the
//! message length; a 1 KB message at omega = 63 therefore consumes 126 bits.

use super::gf2::BinaryField;
use super::{CryptoError, SecurityParams};
use crate::bits::Bits;

/// Key bits consumed by one tag.
pub fn auth_key_bits(params: &SecurityParams) -> usize {
    2 * params.omega as usize
}

/// Worst-case forgery probability for a message of `message_len` bytes.
pub fn forgery_bound(message_len: usize, params: &SecurityParams) -> f64 {
    let blocks = (message_len * 8).div_ceil(params.omega as usize);
    (blocks as f64 + 1.0) / 2f64.powi(params.omega as i32)
}

pub fn auth_tag(
    key: &Bits,
    message: &[u8],
    params: &SecurityParams,
) -> Result<(Bits, usize), CryptoError> {
    let omega = params.omega as usize;
    let needed = auth_key_bits(params);
    if key.len() < needed {
        return Err(CryptoError::KeyTooShort {
            needed,
            got: key.len(),
        });
    }
    let bit_len = message.len() * 8;
    let blocks = bit_len.div_ceil(omega);
    if forgery_bound(message.len(), params) > params.epsilon_k {
        return Err(CryptoError::MessageTooLong {
            blocks,
            omega: params.omega,
        });
    }

    let field = BinaryField::new(params.omega);
    let point = key.read_u64(0, omega);
    let pad = key.read_u64(omega, omega);
    let bits = Bits::from_all_bytes(message);

    let mut acc = 0u64;
    for b in 0..blocks {
        let start = b * omega;
        let width = omega.min(bit_len - start);
        let block = bits.read_u64(start, width) << (omega - width);
        acc = field.mul(acc ^ block, point);
    }
    acc = field.mul(acc ^ (bit_len as u64 & field.mask()), point);
    Ok((Bits::from_u64(acc ^ pad, omega), needed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> SecurityParams {
        SecurityParams {
            epsilon: 1e-6,
            epsilon_k: 1e-3,
            omega: 16,
            ts_key_len_bits: 32,
        }
    }

    fn random_key(rng: &mut impl Rng, len: usize) -> Bits {
        let bytes: Vec<u8> = (0..len.div_ceil(8)).map(|_| rng.gen()).collect();
        Bits::from_bytes(&bytes, len)
    }

    #[test]
    fn deterministic() {
        let p = SecurityParams::default();
        let key = random_key(&mut ChaCha8Rng::seed_from_u64(1), 128);
        let a = auth_tag(&key, b"hello", &p).unwrap();
        let b = auth_tag(&key, b"hello", &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 63);
    }

    #[test]
    fn one_kilobyte_message_consumes_126_bits() {
        let p = SecurityParams::default();
        let key = random_key(&mut ChaCha8Rng::seed_from_u64(2), 126);
        let (_, consumed) = auth_tag(&key, &[0x5a; 1024], &p).unwrap();
        assert_eq!(consumed, 126);
        assert_eq!(consumed, auth_key_bits(&p));
    }

    #[test]
    fn short_key_rejected() {
        let p = SecurityParams::default();
        assert!(matches!(
            auth_tag(&Bits::zeros(125), b"x", &p),
            Err(CryptoError::KeyTooShort { needed: 126, got: 125 })
        ));
    }

    #[test]
    fn overlong_message_rejected_at_toy_size() {
        let p = toy();
        // 1e-3 * 65536 = 65 blocks allowed.
        assert!(auth_tag(&Bits::zeros(32), &[0; 128], &p).is_ok());
        assert!(matches!(
            auth_tag(&Bits::zeros(32), &[0; 200], &p),
            Err(CryptoError::MessageTooLong { .. })
        ));
    }

    #[test]
    fn different_lengths_of_zeros_differ() {
        let p = SecurityParams::default();
        let key = random_key(&mut ChaCha8Rng::seed_from_u64(4), 126);
        let a = auth_tag(&key, &[0; 7], &p).unwrap().0;
        let b = auth_tag(&key, &[0; 8], &p).unwrap().0;
        assert_ne!(a, b);
    }

    /// Single-bit-flip forgery over 10^5 random keys at omega = 16: the
    /// collision count stays within three binomial standard deviations of
    /// n * 2^-16.
    #[test]
    fn bit_flip_forgery_rate() {
        let p = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let message = *b"vote:view=3";
        let trials = 100_000u32;
        let mut hits = 0u32;
        for _ in 0..trials {
            let key = random_key(&mut rng, 32);
            let mut forged = message;
            let bit = rng.gen_range(0..forged.len() * 8);
            forged[bit / 8] ^= 0x80 >> (bit % 8);
            if auth_tag(&key, &message, &p).unwrap().0 == auth_tag(&key, &forged, &p).unwrap().0 {
                hits += 1;
            }
        }
        let q = 2f64.powi(-16);
        let mean = trials as f64 * q;
        let bound = mean + 3.0 * (trials as f64 * q * (1.0 - q)).sqrt();
        assert!((hits as f64) <= bound, "{hits} forgeries > {bound}");
    }
}
