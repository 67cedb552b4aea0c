//! Arithmetic in the multiplicative group modulo the Mersenne prime 2^127 - 1.
//!
//! Small enough that every element and exponent fits a `u128`, which keeps the
//! ephemeral header at 16 bytes. This is a simulation primitive with no real
//! security margin.

pub const MODULUS: u128 = (1u128 << 127) - 1;
pub const GENERATOR: u128 = 3;

#[inline]
fn fold(x: u128) -> u128 {
    let r = (x & MODULUS) + (x >> 127);
    if r >= MODULUS {
        r - MODULUS
    } else {
        r
    }
}

/// `a * b mod (2^127 - 1)` for `a, b < 2^127`.
pub fn mul_mod(a: u128, b: u128) -> u128 {
    const LO: u128 = u64::MAX as u128;
    let (a_hi, a_lo) = (a >> 64, a & LO);
    let (b_hi, b_lo) = (b >> 64, b & LO);

    let lo = a_lo * b_lo;
    let mid = a_hi * b_lo + a_lo * b_hi;
    let hi = a_hi * b_hi;

    let (lo_total, carry) = lo.overflowing_add(mid << 64);
    let hi_total = hi + (mid >> 64) + carry as u128;

    // 2^128 = 2 * 2^127 = 2 (mod p)
    fold(fold(lo_total) + fold(hi_total << 1))
}

pub fn pow_mod(mut base: u128, mut exp: u128) -> u128 {
    let mut acc = 1u128;
    base = fold(base);
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base);
        }
        base = mul_mod(base, base);
        exp >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    // Schoolbook reference through repeated doubling, independent of `mul_mod`.
    fn mul_ref(a: u128, b: u128) -> u128 {
        let mut acc = 0u128;
        let mut x = a % MODULUS;
        let mut y = b;
        while y > 0 {
            if y & 1 == 1 {
                acc = (acc + x) % MODULUS;
            }
            x = (x << 1) % MODULUS;
            y >>= 1;
        }
        acc
    }

    #[test]
    fn mul_matches_reference() {
        let samples = [
            0u128,
            1,
            2,
            GENERATOR,
            MODULUS - 1,
            MODULUS - 2,
            u64::MAX as u128,
            (u64::MAX as u128) << 62,
            0x1234_5678_9abc_def0_0fed_cba9_8765_4321 & MODULUS,
        ];
        for &a in &samples {
            for &b in &samples {
                assert_eq!(mul_mod(a, b), mul_ref(a, b), "{a} * {b}");
            }
        }
    }

    #[test]
    fn fermat() {
        // a^(p-1) = 1 for a not divisible by p
        assert_eq!(pow_mod(GENERATOR, MODULUS - 1), 1);
        assert_eq!(pow_mod(12345, MODULUS - 1), 1);
    }

    #[test]
    fn diffie_hellman_commutes() {
        let (x, y) = (0xdead_beef_u128 << 70, 0x0bad_cafe_u128 << 33);
        let gx = pow_mod(GENERATOR, x);
        let gy = pow_mod(GENERATOR, y);
        assert_eq!(pow_mod(gx, y), pow_mod(gy, x));
    }
}
