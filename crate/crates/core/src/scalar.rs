//! Scalar abstraction for the full-precision code paths.
//!
//! The quantized datapath works on binary16 storage with block floating-point
//! mantissas, but the Winograd transforms, the float-mode kernels and the
//! reference evaluator are written once over [`Real`] and instantiated at
//! `f32` (oracle default) and `f64` (agreement checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-or-rounded conversion from `f64`; literals in the transform
    /// matrices are written as f64 and narrowed here.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn widen(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
