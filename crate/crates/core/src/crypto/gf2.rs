//! Arithmetic in GF(2^omega) for omega up to 64.
//!
//! The modulus is the first irreducible trinomial `x^w + x^a + 1` (by
//! ascending `a`), falling back to pentanomials `x^w + x^a + x^b + x^c + 1`
//! in lexicographic order. Irreducibility is decided with Ben-Or's test.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryField {
    omega: u32,
    modulus: u128,
}

impl BinaryField {
    pub fn new(omega: u32) -> Self {
        assert!((1..=64).contains(&omega), "omega {omega} out of range");
        static CACHE: OnceLock<Mutex<BTreeMap<u32, u128>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
        let modulus = *cache
            .lock()
            .expect("field cache poisoned")
            .entry(omega)
            .or_insert_with(|| find_irreducible(omega));
        Self { omega, modulus }
    }

    pub fn omega(&self) -> u32 {
        self.omega
    }

    pub fn modulus(&self) -> u128 {
        self.modulus
    }

    pub fn mask(&self) -> u64 {
        if self.omega == 64 {
            u64::MAX
        } else {
            (1u64 << self.omega) - 1
        }
    }

    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce(clmul(a, b))
    }

    /// Folds the bits above `x^omega` back down with the sparse low part
    /// of the modulus until the product fits.
    fn reduce(&self, mut p: u128) -> u64 {
        let w = self.omega;
        let low = self.modulus ^ (1u128 << w);
        let mask = (1u128 << w) - 1;
        loop {
            let hi = p >> w;
            if hi == 0 {
                return p as u64;
            }
            p &= mask;
            let mut terms = low;
            while terms != 0 {
                p ^= hi << terms.trailing_zeros();
                terms &= terms - 1;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn clmul(a: u64, b: u64) -> u128 {
    if std::arch::is_x86_feature_detected!("pclmulqdq") {
        // SAFETY: the feature was detected at runtime.
        unsafe { clmul_hw(a, b) }
    } else {
        clmul_soft(a, b)
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq", enable = "sse2")]
unsafe fn clmul_hw(a: u64, b: u64) -> u128 {
    use std::arch::x86_64::{_mm_clmulepi64_si128, _mm_cvtsi64_si128, _mm_storeu_si128};
    let x = _mm_cvtsi64_si128(a as i64);
    let y = _mm_cvtsi64_si128(b as i64);
    let r = _mm_clmulepi64_si128(x, y, 0);
    let mut out = 0u128;
    _mm_storeu_si128(&mut out as *mut u128 as *mut _, r);
    out
}

#[cfg(not(target_arch = "x86_64"))]
fn clmul(a: u64, b: u64) -> u128 {
    clmul_soft(a, b)
}

fn clmul_soft(a: u64, b: u64) -> u128 {
    let mut acc = 0u128;
    let a = a as u128;
    let mut b = b;
    while b != 0 {
        let i = b.trailing_zeros();
        acc ^= a << i;
        b &= b - 1;
    }
    acc
}

fn degree(p: u128) -> i32 {
    127 - p.leading_zeros() as i32
}

fn poly_mod(mut p: u128, m: u128) -> u128 {
    let dm = degree(m);
    while p != 0 && degree(p) >= dm {
        p ^= m << (degree(p) - dm);
    }
    p
}

fn poly_gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let r = poly_mod(a, b);
        a = b;
        b = r;
    }
    a
}

/// Ben-Or: `f` of degree `n` is irreducible iff
/// `gcd(f, x^(2^i) - x mod f) = 1` for every `1 <= i <= n/2`.
pub(crate) fn is_irreducible(f: u128) -> bool {
    let n = degree(f);
    if n < 1 {
        return false;
    }
    if n == 1 {
        return true;
    }
    let mut power = 0b10u128; // x
    for _ in 1..=n / 2 {
        power = poly_mod(clmul(power as u64, power as u64), f);
        if poly_gcd(f, power ^ 0b10) != 1 {
            return false;
        }
    }
    true
}

fn find_irreducible(omega: u32) -> u128 {
    let top = 1u128 << omega;
    for a in 1..omega {
        let f = top | (1u128 << a) | 1;
        if is_irreducible(f) {
            return f;
        }
    }
    for a in 3..omega {
        for b in 2..a {
            for c in 1..b {
                let f = top | (1u128 << a) | (1u128 << b) | (1u128 << c) | 1;
                if is_irreducible(f) {
                    return f;
                }
            }
        }
    }
    // Degree 1: x + 1.
    top | 1
}
