//! Exact power-of-two helpers and round-to-nearest-even onto small float grids.

use half::f16;

/// `2^k` built directly from the exponent bits. Exact for normal f64 range.
#[inline]
pub fn exp2i(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k), "exponent {k} out of f64 normal range");
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `floor(log2(|x|))` for finite non-zero `x`.
#[inline]
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x != 0.0 && x.is_finite());
    let bits = x.abs().to_bits();
    let biased = (bits >> 52) as i32;
    if biased == 0 {
        // f64 subnormal
        let frac = bits & ((1u64 << 52) - 1);
        -1022 - (frac.leading_zeros() as i32 - 11)
    } else {
        biased - 1023
    }
}

/// Rounds `x` to a binary float grid with `frac_bits` stored fraction bits,
/// minimum normal exponent `min_exp` (gradual underflow below it) and maximum
/// exponent `max_exp`. Ties go to even. Results beyond the largest finite
/// value saturate; the flag reports that saturation happened.
pub fn round_to_grid(x: f64, frac_bits: u32, min_exp: i32, max_exp: i32) -> (f64, bool) {
    if x == 0.0 || !x.is_finite() {
        return (x, false);
    }
    let e = floor_log2(x).max(min_exp);
    let quantum = exp2i(e - frac_bits as i32);
    let r = (x / quantum).round_ties_even() * quantum;
    let max = (2.0 - exp2i(-(frac_bits as i32))) * exp2i(max_exp);
    if r.abs() > max {
        (max.copysign(x), true)
    } else {
        (r, false)
    }
}

pub const HALF_FRAC_BITS: u32 = 10;
pub const HALF_MIN_EXP: i32 = -14;
pub const HALF_MAX_EXP: i32 = 15;

/// Round-to-nearest-even conversion into binary16, saturating at +-65504.
pub fn half_from_f64(x: f64) -> (f16, bool) {
    let (r, sat) = round_to_grid(x, HALF_FRAC_BITS, HALF_MIN_EXP, HALF_MAX_EXP);
    // r lies on the binary16 grid, so this conversion is exact
    (f16::from_f64(r), sat)
}

/// Plain binary16 addition (one rounding), the baseline the extended
/// accumulator is compared against.
pub fn half_add(a: f16, b: f16) -> f16 {
    half_from_f64(a.to_f64() + b.to_f64()).0
}

/// Distance from `h` to the next representable binary16 of larger magnitude.
pub fn half_ulp(h: f16) -> f64 {
    let x = h.to_f64();
    if x == 0.0 {
        return exp2i(HALF_MIN_EXP - HALF_FRAC_BITS as i32);
    }
    let e = floor_log2(x).max(HALF_MIN_EXP);
    exp2i(e - HALF_FRAC_BITS as i32)
}
