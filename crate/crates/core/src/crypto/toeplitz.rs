//! Modified Toeplitz hashing.
//!
//! For an `n`-bit input and `m`-bit output the matrix is `[I_m | T]` where
//! `T` is the `m x (n - m)` Toeplitz matrix `T[i][j] = s[i - j + n - m - 1]`
//! over an `n - 1` bit public seed `s`. Column `j` of `T` is the seed
//! window starting at `n - m - 1 - j`, so the product is a sum of seed
//! windows selected by the set bits of the input tail.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::CryptoError;
use crate::bits::Bits;

/// `len` seed bits expanded from a 64-bit public seed.
pub fn toeplitz_seed_bits(seed: u64, len: usize) -> Bits {
    let mut bytes = vec![0u8; len.div_ceil(8)];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
    Bits::from_bytes(&bytes, len)
}

pub fn privacy_amplify(input: &Bits, output_len: usize, seed: u64) -> Result<Bits, CryptoError> {
    let n = input.len();
    if output_len > n {
        return Err(CryptoError::OutputTooLong {
            requested: output_len,
            available: n,
        });
    }
    let m = output_len;
    let k = n - m;
    let mut out = input.slice(0, m);
    if k == 0 || m == 0 {
        return Ok(out);
    }
    let seed_bits = toeplitz_seed_bits(seed, n - 1);
    let tail = input.slice(m, k);
    for (wi, &word) in tail.words().iter().enumerate() {
        let mut w = word;
        while w != 0 {
            let lead = w.leading_zeros() as usize;
            let j = wi * 64 + lead;
            out.xor_window_from(&seed_bits, k - 1 - j);
            w &= !(1u64 << (63 - lead));
        }
    }
    Ok(out)
}

/// 64-bit extractor digest of a length-prefixed bit string.
pub fn digest64(input: &Bits, seed: u64) -> u64 {
    let framed = Bits::concat([&Bits::from_u64(input.len() as u64, 64), input]);
    privacy_amplify(&framed, 64, seed)
        .expect("framed input has at least 64 bits")
        .read_u64(0, 64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct matrix-vector product over GF(2) from the matrix definition.
    fn naive(input: &[bool], m: usize, seed: &[bool]) -> Vec<bool> {
        let n = input.len();
        let k = n - m;
        (0..m)
            .map(|i| {
                let mut bit = input[i];
                for j in 0..k {
                    bit ^= seed[i + k - 1 - j] & input[m + j];
                }
                bit
            })
            .collect()
    }

    #[test]
    fn matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, m) in &[(16, 8), (130, 64), (200, 199), (300, 1), (65, 64)] {
            let input: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let seed: u64 = rng.gen();
            let got = privacy_amplify(&Bits::from_bools(&input), m, seed).unwrap();
            let seed_bits = toeplitz_seed_bits(seed, n - 1).to_bools();
            assert_eq!(got.to_bools(), naive(&input, m, &seed_bits), "n={n} m={m}");
        }
    }

    #[test]
    fn full_length_output_is_identity() {
        let input = Bits::from_all_bytes(&[0xde, 0xad, 0xbe, 0xef]);
        assert_eq!(privacy_amplify(&input, 32, 77).unwrap(), input);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bytes: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
        let input = Bits::from_all_bytes(&bytes);
        let a = privacy_amplify(&input, 1024, 5).unwrap();
        let b = privacy_amplify(&input, 1024, 5).unwrap();
        assert_eq!(a.len(), 1024);
        assert_eq!(a, b);
    }

    #[test]
    fn longer_output_rejected() {
        assert!(matches!(
            privacy_amplify(&Bits::zeros(8), 9, 0),
            Err(CryptoError::OutputTooLong { .. })
        ));
    }

    /// For a fixed seed, hashing every 16-bit input and sampling random
    /// distinct pairs gives a collision rate at most twice 2^-8.
    #[test]
    fn toy_collision_rate_over_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..4u64 {
            let outputs: Vec<u64> = (0u64..1 << 16)
                .map(|x| privacy_amplify(&Bits::from_u64(x, 16), 8, seed).unwrap().read_u64(0, 8))
                .collect();
            let trials = 200_000;
            let mut collisions = 0;
            for _ in 0..trials {
                let a = rng.gen_range(0..1usize << 16);
                let mut b = rng.gen_range(0..1usize << 16);
                while b == a {
                    b = rng.gen_range(0..1usize << 16);
                }
                if outputs[a] == outputs[b] {
                    collisions += 1;
                }
            }
            let rate = collisions as f64 / trials as f64;
            assert!(rate <= 2.0 / 256.0, "seed {seed}: rate {rate}");
        }
    }

    /// Exhaustive over every seed of the 16 -> 8 family: each distinct pair
    /// collides for at most 2^-8 of the seeds.
    #[test]
    fn two_universal_over_all_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<(u16, u16)> = (0..24)
            .map(|_| {
                let a: u16 = rng.gen();
                let mut b: u16 = rng.gen();
                while b == a {
                    b = rng.gen();
                }
                (a, b)
            })
            .collect();
        let mut counts = vec![0usize; pairs.len()];
        for s in 0u32..(1 << 15) {
            let seed: Vec<bool> = (0..15).map(|i| s >> i & 1 == 1).collect();
            for (c, &(a, b)) in counts.iter_mut().zip(&pairs) {
                let xa: Vec<bool> = (0..16).map(|i| a >> (15 - i) & 1 == 1).collect();
                let xb: Vec<bool> = (0..16).map(|i| b >> (15 - i) & 1 == 1).collect();
                if naive(&xa, 8, &seed) == naive(&xb, 8, &seed) {
                    *c += 1;
                }
            }
        }
        for c in counts {
            assert!(c <= (1 << 15) >> 8, "{c} colliding seeds");
        }
    }
}
