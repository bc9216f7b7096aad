//! Extended partial-sum accumulator: binary16's sign and 5-bit exponent with
//! the mantissa widened from 10 to 15 bits.

use std::fmt;

use half::f16;

use super::round::{exp2i, floor_log2, half_from_f64, round_to_grid};
use super::BfpError;

pub const EXT_FRAC_BITS: u32 = 15;
const EXP_BIAS: i32 = 15;
const MIN_EXP: i32 = 1 - EXP_BIAS;
const MAX_EXP: i32 = 30 - EXP_BIAS;
const FRAC_MASK: u32 = (1 << EXT_FRAC_BITS) - 1;

/// Packed as `sign << 20 | exponent << 15 | mantissa`. Exponent field 31 is
/// never produced; results past the largest finite value saturate.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ExtAccum(u32);

impl ExtAccum {
    pub const ZERO: ExtAccum = ExtAccum(0);
    pub const MAX: ExtAccum = ExtAccum((30 << EXT_FRAC_BITS) | FRAC_MASK);

    pub fn from_bits(bits: u32) -> Result<Self, BfpError> {
        if bits >> 21 != 0 || (bits >> EXT_FRAC_BITS) & 0x1f == 0x1f {
            return Err(BfpError::Format(format!("invalid accumulator bits {bits:#x}")));
        }
        Ok(Self(bits))
    }

    pub fn to_bits(self) -> u32 {
        self.0
    }

    pub fn is_sign_negative(self) -> bool {
        self.0 >> 20 != 0
    }

    pub fn exponent_field(self) -> u32 {
        (self.0 >> EXT_FRAC_BITS) & 0x1f
    }

    pub fn mantissa_field(self) -> u32 {
        self.0 & FRAC_MASK
    }

    pub fn to_f64(self) -> f64 {
        let e = self.exponent_field() as i32;
        let m = self.mantissa_field() as f64;
        let mag = if e == 0 {
            m * exp2i(MIN_EXP - EXT_FRAC_BITS as i32)
        } else {
            (m + exp2i(EXT_FRAC_BITS as i32)) * exp2i(e - EXP_BIAS - EXT_FRAC_BITS as i32)
        };
        if self.is_sign_negative() {
            -mag
        } else {
            mag
        }
    }

    /// Rounds to nearest even; the flag reports saturation to [`ExtAccum::MAX`].
    pub fn from_f64_saturating(x: f64) -> (Self, bool) {
        debug_assert!(x.is_finite());
        let (r, sat) = round_to_grid(x, EXT_FRAC_BITS, MIN_EXP, MAX_EXP);
        (Self::pack_exact(r), sat)
    }

    pub fn from_f64(x: f64) -> Result<Self, BfpError> {
        if !x.is_finite() {
            return Err(BfpError::Format(format!("non-finite value {x}")));
        }
        match Self::from_f64_saturating(x) {
            (v, false) => Ok(v),
            (v, true) => Err(BfpError::Overflow { saturated: v }),
        }
    }

    // r must already lie on the accumulator grid
    fn pack_exact(r: f64) -> Self {
        let sign = if r.is_sign_negative() { 1u32 << 20 } else { 0 };
        let a = r.abs();
        if a == 0.0 {
            return Self(sign);
        }
        let e = floor_log2(a);
        if e < MIN_EXP {
            let m = (a / exp2i(MIN_EXP - EXT_FRAC_BITS as i32)) as u32;
            Self(sign | m)
        } else {
            let m = (a / exp2i(e - EXT_FRAC_BITS as i32)) as u32 - (1 << EXT_FRAC_BITS);
            Self(sign | (((e + EXP_BIAS) as u32) << EXT_FRAC_BITS) | m)
        }
    }

    /// Value-preserving widening of a finite binary16.
    pub fn widen(h: f16) -> Self {
        Self::pack_exact(h.to_f64())
    }

    /// Floating add at 15-bit mantissa precision; saturates on overflow.
    pub fn add(self, other: Self) -> Self {
        // both operands are multiples of 2^-29 below 2^16, so the f64 sum is exact
        Self::from_f64_saturating(self.to_f64() + other.to_f64()).0
    }

    pub fn try_add(self, other: Self) -> Result<Self, BfpError> {
        Self::from_f64(self.to_f64() + other.to_f64())
    }

    /// Round-to-nearest-even back to binary16, saturating at +-65504.
    pub fn truncate_to_half(self) -> f16 {
        half_from_f64(self.to_f64()).0
    }
}

impl fmt::Debug for ExtAccum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExtAccum({})", self.to_f64())
    }
}

pub fn accum_add(acc: ExtAccum, x: ExtAccum) -> Result<ExtAccum, BfpError> {
    acc.try_add(x)
}

pub fn truncate_to_half(acc: ExtAccum) -> f16 {
    acc.truncate_to_half()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ext(x: f64) -> ExtAccum {
        ExtAccum::from_f64(x).unwrap()
    }

    #[test]
    fn add_zero_is_identity() {
        for x in [1.0, -3.25, 1e-6, 60000.0] {
            let a = ext(x);
            assert_eq!(accum_add(a, ExtAccum::ZERO).unwrap(), a);
        }
    }

    #[test]
    fn widen_then_truncate_is_identity_for_every_half() {
        for bits in 0u16..=u16::MAX {
            let h = f16::from_bits(bits);
            if !h.is_finite() {
                continue;
            }
            let w = ExtAccum::widen(h);
            assert_eq!(w.to_f64(), h.to_f64());
            assert_eq!(w.truncate_to_half().to_bits(), h.to_bits(), "bits {bits:#x}");
        }
    }

    #[test]
    fn extended_sum_keeps_sub_half_ulp_terms() {
        let step = ExtAccum::widen(f16::from_f64(2f64.powi(-11)));
        let mut acc = ExtAccum::widen(f16::ONE);
        let mut plain = f16::ONE;
        for _ in 0..1024 {
            acc = accum_add(acc, step).unwrap();
            plain = crate::bfp::half_add(plain, f16::from_f64(2f64.powi(-11)));
        }
        assert_eq!(acc.to_f64(), 1.5);
        assert_eq!(plain.to_f64(), 1.0);
    }

    #[test]
    fn truncation_rounding_table() {
        // ulp of the accumulator at 1.0 is 2^-15; half's is 2^-10
        let below = ext(1.0 + 2f64.powi(-11) - 2f64.powi(-15));
        assert_eq!(truncate_to_half(below).to_f64(), 1.0);
        let tie = ext(1.0 + 2f64.powi(-11));
        assert_eq!(truncate_to_half(tie).to_f64(), 1.0);
        let above = ext(1.0 + 2f64.powi(-11) + 2f64.powi(-15));
        assert_eq!(truncate_to_half(above).to_f64(), 1.0009765625);
        let odd_tie = ext(1.0 + 2f64.powi(-10) + 2f64.powi(-11));
        assert_eq!(truncate_to_half(odd_tie).to_f64(), 1.0 + 2f64.powi(-9));
    }

    #[test]
    fn sub_ulp_inputs_round_onto_the_grid() {
        // 2^-16 at 1.0 is half an accumulator ulp: ties to even
        assert_eq!(ext(1.0 + 2f64.powi(-11) + 2f64.powi(-16)).to_f64(), 1.0 + 2f64.powi(-11));
        assert_eq!(ext(1.0 + 2f64.powi(-11) - 2f64.powi(-16)).to_f64(), 1.0 + 2f64.powi(-11));
    }

    #[test]
    fn truncation_is_monotone() {
        let mut prev = f16::MIN;
        let mut x = -70000.0f64;
        while x < 70000.0 {
            let (a, _) = ExtAccum::from_f64_saturating(x);
            let h = a.truncate_to_half();
            assert!(h >= prev, "x={x}");
            prev = h;
            x += 13.37;
        }
    }

    #[test]
    fn overflow_saturates_and_signals() {
        let big = ext(60000.0);
        match accum_add(big, big) {
            Err(BfpError::Overflow { saturated }) => assert_eq!(saturated, ExtAccum::MAX),
            other => panic!("expected overflow, got {other:?}"),
        }
        assert_eq!(big.add(big), ExtAccum::MAX);
        assert_eq!(ExtAccum::MAX.to_f64(), 65535.0);
        assert_eq!(ExtAccum::MAX.truncate_to_half().to_f64(), 65504.0);
    }

    #[test]
    fn bits_round_trip_and_reject_reserved_exponent() {
        let a = ext(-0.3125);
        assert_eq!(ExtAccum::from_bits(a.to_bits()).unwrap(), a);
        assert!(ExtAccum::from_bits(0x1f << 15).is_err());
        assert!(ExtAccum::from_bits(1 << 21).is_err());
    }

    #[test]
    fn subnormal_accumulator_values() {
        let tiny = ext(2f64.powi(-29));
        assert_eq!(tiny.exponent_field(), 0);
        assert_eq!(tiny.mantissa_field(), 1);
        assert_eq!(ext(2f64.powi(-31)).to_f64(), 0.0);
    }
}
