//! Block floating-point normalization: every element of a block shares the
//! largest exponent in the block and keeps a signed fixed-point mantissa.

use half::f16;

use super::accum::ExtAccum;
use super::round::{exp2i, floor_log2};
use super::BfpError;

/// Block geometry and mantissa width (sign included).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BfpConfig {
    pub block_size: usize,
    pub mantissa_bits: u32,
}

impl Default for BfpConfig {
    fn default() -> Self {
        Self {
            block_size: 32,
            mantissa_bits: 16,
        }
    }
}

impl BfpConfig {
    pub const MAX_MANTISSA_BITS: u32 = 31;
    pub const MAX_BLOCK: usize = 4096;

    pub fn validate(&self) -> Result<(), BfpError> {
        if !(2..=Self::MAX_MANTISSA_BITS).contains(&self.mantissa_bits) {
            return Err(BfpError::Config(format!(
                "mantissa width {} outside 2..={}",
                self.mantissa_bits,
                Self::MAX_MANTISSA_BITS
            )));
        }
        if self.block_size == 0 || self.block_size > Self::MAX_BLOCK {
            return Err(BfpError::Config(format!(
                "block size {} outside 1..={}",
                self.block_size,
                Self::MAX_BLOCK
            )));
        }
        Ok(())
    }

    /// Number of blocks needed to cover `len` elements.
    pub fn blocks(&self, len: usize) -> usize {
        len.div_ceil(self.block_size)
    }
}

/// Anything a block can be normalized from.
pub trait BlockValue: Copy {
    fn value(self) -> f64;
}

impl BlockValue for f16 {
    fn value(self) -> f64 {
        self.to_f64()
    }
}

impl BlockValue for f32 {
    fn value(self) -> f64 {
        self as f64
    }
}

impl BlockValue for f64 {
    fn value(self) -> f64 {
        self
    }
}

/// Normalizes `values` into `out`, returning the shared exponent.
///
/// Each element is first written as an integer mantissa `m_i` with
/// `mantissa_bits - 1` magnitude bits at its own exponent `e_i`, then shifted
/// right by `shared - e_i` (truncating toward zero on the magnitude). An
/// all-zero block gets shared exponent 0.
pub fn normalize_into<V: BlockValue>(
    values: &[V],
    mantissa_bits: u32,
    out: &mut [i32],
) -> Result<i32, BfpError> {
    debug_assert_eq!(values.len(), out.len());
    let frac = mantissa_bits as i32 - 2;
    let mut shared: Option<i32> = None;
    for v in values {
        let x = v.value();
        if !x.is_finite() {
            return Err(BfpError::Format(format!("non-finite value {x} in block")));
        }
        if x != 0.0 {
            let e = floor_log2(x);
            shared = Some(shared.map_or(e, |s| s.max(e)));
        }
    }
    let Some(shared) = shared else {
        out.fill(0);
        return Ok(0);
    };
    for (v, m) in values.iter().zip(out.iter_mut()) {
        let x = v.value();
        if x == 0.0 {
            *m = 0;
            continue;
        }
        let e = floor_log2(x);
        let own = (x.abs() * exp2i(frac - e)) as i64;
        let shift = (shared - e) as u32;
        let mag = if shift >= 63 { 0 } else { own >> shift };
        *m = if x < 0.0 { -mag as i32 } else { mag as i32 };
    }
    Ok(shared)
}

/// Exact integer product-sum of two mantissa vectors.
#[inline]
pub fn dot_mantissas(a: &[i32], b: &[i32]) -> i128 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc: i128 = 0;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as i64 as i128 * y as i128;
    }
    acc
}

/// `value * 2^exponent`, the exact result of a block product-sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaledInt {
    pub value: i128,
    pub exponent: i32,
}

impl ScaledInt {
    /// Nearest f64; exact whenever `|value| < 2^53`.
    pub fn to_f64(self) -> f64 {
        if self.value == 0 {
            return 0.0;
        }
        let v = self.value as f64;
        // split the scale so neither factor leaves the normal range
        let e = self.exponent;
        let half = e / 2;
        v * exp2i(half) * exp2i(e - half)
    }

    pub fn to_ext(self) -> ExtAccum {
        ExtAccum::from_f64_saturating(self.to_f64()).0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BfpBlock {
    shared_exponent: i32,
    mantissas: Vec<i32>,
    mantissa_bits: u32,
}

impl BfpBlock {
    pub fn normalize<V: BlockValue>(values: &[V], mantissa_bits: u32) -> Result<Self, BfpError> {
        if values.is_empty() {
            return Err(BfpError::Format("empty block".into()));
        }
        BfpConfig {
            block_size: values.len().min(BfpConfig::MAX_BLOCK),
            mantissa_bits,
        }
        .validate()?;
        let mut mantissas = vec![0; values.len()];
        let shared_exponent = normalize_into(values, mantissa_bits, &mut mantissas)?;
        Ok(Self {
            shared_exponent,
            mantissas,
            mantissa_bits,
        })
    }

    pub fn from_parts(shared_exponent: i32, mantissas: Vec<i32>, mantissa_bits: u32) -> Self {
        Self {
            shared_exponent,
            mantissas,
            mantissa_bits,
        }
    }

    pub fn shared_exponent(&self) -> i32 {
        self.shared_exponent
    }

    pub fn mantissas(&self) -> &[i32] {
        &self.mantissas
    }

    pub fn mantissa_bits(&self) -> u32 {
        self.mantissa_bits
    }

    pub fn len(&self) -> usize {
        self.mantissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissas.is_empty()
    }

    /// Weight of one mantissa LSB, as a power-of-two exponent.
    pub fn lsb_exponent(&self) -> i32 {
        self.shared_exponent - (self.mantissa_bits as i32 - 2)
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let scale = exp2i(self.lsb_exponent());
        self.mantissas.iter().map(|&m| m as f64 * scale).collect()
    }
}

pub fn normalize_block<V: BlockValue>(values: &[V], cfg: &BfpConfig) -> Result<BfpBlock, BfpError> {
    BfpBlock::normalize(values, cfg.mantissa_bits)
}

/// Exact block product-sum before conversion to the accumulator format.
pub fn block_dot_exact(a: &BfpBlock, b: &BfpBlock) -> Result<ScaledInt, BfpError> {
    if a.len() != b.len() {
        return Err(BfpError::Length(a.len(), b.len()));
    }
    Ok(ScaledInt {
        value: dot_mantissas(&a.mantissas, &b.mantissas),
        exponent: a.lsb_exponent() + b.lsb_exponent(),
    })
}

pub fn block_dot(a: &BfpBlock, b: &BfpBlock) -> Result<ExtAccum, BfpError> {
    Ok(block_dot_exact(a, b)?.to_ext())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(x: f64) -> f16 {
        f16::from_f64(x)
    }

    #[test]
    fn worked_example_shifts() {
        let xs = [h(1.5), h(0.5), h(3.0)];
        let b = BfpBlock::normalize(&xs, 16).unwrap();
        assert_eq!(b.shared_exponent(), 1);
        let shifts: Vec<i32> = xs
            .iter()
            .map(|x| b.shared_exponent() - floor_log2(x.to_f64()))
            .collect();
        assert_eq!(shifts, vec![1, 2, 0]);
        // 14 fraction bits below the shared exponent
        assert_eq!(b.mantissas(), &[3 << 12, 1 << 12, 3 << 13]);
        assert_eq!(b.reconstruct(), vec![1.5, 0.5, 3.0]);
    }

    #[test]
    fn identical_values_lose_nothing() {
        let xs = [h(0.7); 8];
        let b = BfpBlock::normalize(&xs, 16).unwrap();
        assert!(b.reconstruct().iter().all(|&r| r == xs[0].to_f64()));
    }

    #[test]
    fn zero_maps_to_zero() {
        let b = BfpBlock::normalize(&[0.0f32, 2.0, -0.0], 16).unwrap();
        assert_eq!(b.mantissas()[0], 0);
        assert_eq!(b.mantissas()[2], 0);
        let z = BfpBlock::normalize(&[0.0f32; 4], 16).unwrap();
        assert_eq!(z.shared_exponent(), 0);
        assert!(z.mantissas().iter().all(|&m| m == 0));
    }

    #[test]
    fn shift_truncates_toward_zero() {
        // -(2^-6 + 2^-16) next to 1.0: the 2^-16 bit falls below the LSB
        let xs = [1.0f64, -(1.0 + 2f64.powi(-10)) / 64.0];
        let b = BfpBlock::normalize(&xs, 16).unwrap();
        assert_eq!(b.mantissas()[1], -(1 << 8));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            BfpBlock::normalize(&[1.0f32, f32::NAN], 16),
            Err(BfpError::Format(_))
        ));
        assert!(BfpBlock::normalize(&[1.0f32, f32::INFINITY], 16).is_err());
        assert!(BfpBlock::normalize::<f32>(&[], 16).is_err());
        assert!(BfpBlock::normalize(&[1.0f32], 40).is_err());
    }

    #[test]
    fn small_exact_dots() {
        let two = BfpBlock::normalize(&[2.0f32], 16).unwrap();
        let three = BfpBlock::normalize(&[3.0f32], 16).unwrap();
        assert_eq!(block_dot(&two, &three).unwrap().to_f64(), 6.0);
        let zero = BfpBlock::normalize(&[0.0f32], 16).unwrap();
        assert_eq!(block_dot(&two, &zero).unwrap().to_f64(), 0.0);
        assert!(matches!(
            block_dot(&two, &BfpBlock::normalize(&[1.0f32, 1.0], 16).unwrap()),
            Err(BfpError::Length(1, 2))
        ));
    }
}
