//! Software binary16, flat fp32 tensors and the seeded RNG.
//!
//! Every cast here is implemented with integer bit manipulation so results
//! are identical on every target, whether or not it has native half support.

use alloc::vec::Vec;
use core::fmt;
use core::ops::{Deref, DerefMut};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// An IEEE 754 binary16 value stored as its raw bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(transparent)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    /// Largest finite binary16 value, 65504.
    pub const MAX: Half = Half(0x7BFF);

    #[inline]
    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn from_f32(x: f32) -> Half {
        f32_to_f16(x)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f16_to_f32(self)
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        self.0 & 0x7C00 == 0x7C00 && self.0 & 0x03FF != 0
    }

    #[inline]
    pub const fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

/// Narrow an fp32 value to binary16 with round-to-nearest-even.
///
/// Values past the largest finite half (after rounding) become signed
/// infinity; tiny values go through the subnormal range and underflow to a
/// signed zero. NaN stays NaN (quiet bit forced, top payload bits kept).
pub fn f32_to_f16(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return Half(sign | 0x7C00);
        }
        return Half(sign | 0x7E00 | (man >> 13) as u16);
    }

    // Rebias from 127 to 15.
    let half_exp = exp - 127 + 15;
    if half_exp >= 0x1F {
        return Half(sign | 0x7C00);
    }

    if half_exp <= 0 {
        // Subnormal (or zero) result. The value is m * 2^(exp - 150) and
        // one half-subnormal ulp is 2^-24, so the quotient is m >> (14 - half_exp).
        if exp == 0 {
            // fp32 subnormals are far below 2^-25 and round to zero.
            return Half(sign);
        }
        let m = man | 0x0080_0000;
        let shift = (14 - half_exp) as u32;
        if shift > 24 {
            return Half(sign);
        }
        let q = m >> shift;
        let rem = m & ((1u32 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        let q = if rem > halfway || (rem == halfway && q & 1 == 1) {
            q + 1
        } else {
            q
        };
        // A carry out of the subnormal range lands exactly on the smallest
        // normal encoding, which is the correct result.
        return Half(sign | q as u16);
    }

    let q = ((half_exp as u32) << 10) | (man >> 13);
    let rem = man & 0x1FFF;
    let q = if rem > 0x1000 || (rem == 0x1000 && q & 1 == 1) {
        q + 1
    } else {
        q
    };
    // Carry may propagate into the exponent and up to 0x7C00 (infinity).
    Half(sign | q as u16)
}

/// Exact widening of binary16 to fp32.
pub fn f16_to_f32(h: Half) -> f32 {
    let bits = h.0 as u32;
    let sign = (bits & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1F;
    let man = bits & 0x03FF;

    let out = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // Normalise the subnormal: find the leading one.
            let lz = man.leading_zeros() - 22; // zeros within the 10-bit field
            let man = (man << (lz + 1)) & 0x03FF;
            let exp = 127 - 15 - lz;
            sign | (exp << 23) | (man << 13)
        }
        (0x1F, 0) => sign | 0x7F80_0000,
        (0x1F, _) => sign | 0x7FC0_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(out)
}

/// Round every element of an fp32 slice to binary16.
pub fn to_halves(values: &[f32]) -> Vec<Half> {
    values.iter().copied().map(f32_to_f16).collect()
}

/// Widen every element of a binary16 slice to fp32.
pub fn to_f32s(values: &[Half]) -> Vec<f32> {
    values.iter().copied().map(f16_to_f32).collect()
}

/// A contiguous 1-D fp32 buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatTensor(Vec<f32>);

impl FlatTensor {
    pub fn zeros(len: usize) -> Self {
        FlatTensor(alloc::vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f32>) -> Self {
        FlatTensor(values)
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &FlatTensor) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f32>> for FlatTensor {
    fn from(values: Vec<f32>) -> Self {
        FlatTensor(values)
    }
}

impl Deref for FlatTensor {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for FlatTensor {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

/// Deterministic random source: ChaCha8 seeded from a `u64`.
///
/// Floats are drawn from the top 24 bits of a `u32`, so a stream only
/// depends on the seed and the order of calls.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`, 24-bit resolution.
    pub fn next_unit(&mut self) -> f32 {
        (self.inner.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(&mut self, scale: f32) -> f32 {
        (2.0 * self.next_unit() - 1.0) * scale
    }

    /// Uniform integer in `[lo, hi]` (inclusive). Slight modulo bias is fine
    /// for test-data generation.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.inner.next_u64() % span) as usize
    }
}

/// `n` values uniform in `[-scale, scale]`.
pub fn rng_fill(rng: &mut SeededRng, n: usize, scale: f32) -> FlatTensor {
    FlatTensor((0..n).map(|_| rng.uniform(scale)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        assert_eq!(f32_to_f16(0.0).to_bits(), 0x0000);
        assert_eq!(f32_to_f16(-0.0).to_bits(), 0x8000);
        assert_eq!(f32_to_f16(1.0).to_bits(), 0x3C00);
        assert_eq!(f32_to_f16(65520.0).to_bits(), 0x7C00);
        assert_eq!(f32_to_f16(-65520.0).to_bits(), 0xFC00);
        // Just below the rounding boundary stays at MAX.
        assert_eq!(f32_to_f16(65519.0), Half::MAX);
        assert_eq!(f16_to_f32(Half::from_bits(0x3C00)), 1.0);
        assert_eq!(f16_to_f32(Half::ZERO), 0.0);
    }

    #[test]
    fn specials() {
        assert_eq!(f32_to_f16(f32::INFINITY), Half::INFINITY);
        assert_eq!(f32_to_f16(f32::NEG_INFINITY), Half::NEG_INFINITY);
        assert!(f32_to_f16(f32::NAN).is_nan());
        assert!(f16_to_f32(Half::from_bits(0x7E00)).is_nan());
        assert_eq!(f16_to_f32(Half::INFINITY), f32::INFINITY);
    }

    #[test]
    fn subnormals() {
        let min_sub = 2f32.powi(-24);
        assert_eq!(f32_to_f16(min_sub).to_bits(), 0x0001);
        assert_eq!(f16_to_f32(Half::from_bits(0x0001)), min_sub);
        // Exactly half the smallest subnormal ties to even (zero).
        assert_eq!(f32_to_f16(min_sub / 2.0).to_bits(), 0x0000);
        // Slightly above half rounds up.
        assert_eq!(f32_to_f16(min_sub * 0.75).to_bits(), 0x0001);
        assert_eq!(f16_to_f32(Half::from_bits(0x03FF)), 1023.0 * min_sub);
        // Largest subnormal plus a bit rounds into the smallest normal.
        assert_eq!(f32_to_f16(2f32.powi(-14) * 0.99999).to_bits(), 0x0400);
    }

    #[test]
    fn ties_to_even() {
        // 1 + 2^-11 is halfway between 1.0 and the next half; even wins.
        assert_eq!(f32_to_f16(1.0 + 2f32.powi(-11)).to_bits(), 0x3C00);
        // 1 + 3*2^-11 is halfway between 0x3C01 and 0x3C02; rounds to 0x3C02.
        assert_eq!(f32_to_f16(1.0 + 3.0 * 2f32.powi(-11)).to_bits(), 0x3C02);
    }

    #[test]
    fn rng_fill_contract() {
        assert!(rng_fill(&mut SeededRng::new(3), 0, 1.0).is_empty());
        let a = rng_fill(&mut SeededRng::new(9), 64, 0.5);
        let b = rng_fill(&mut SeededRng::new(9), 64, 0.5);
        assert!(a.bitwise_eq(&b));
        assert!(a.iter().all(|v| (-0.5..=0.5).contains(v)));
        let one = rng_fill(&mut SeededRng::new(1), 100, 1.0);
        let two = rng_fill(&mut SeededRng::new(2), 100, 1.0);
        assert!(one.iter().zip(two.iter()).any(|(x, y)| x != y));
    }
}
