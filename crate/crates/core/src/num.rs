//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is written against [`Real`], with
//! implementations provided for `f32` and `f64`. The crate-root alias
//! [`crate::Scalar`] (`f64`) is what the training pipeline and the CLI
//! instantiate; the desk-scale sizes this engine targets make 64-bit
//! precision the sensible default.

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::distributions::uniform::SampleUniform;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar used by the embedding tables, the gradient tape
/// and every loss/metric computation.
pub trait Real:
    'static
    + Float
    + NumAssign
    + FromPrimitive
    + SampleUniform
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
{
    /// Lossless-enough conversion from an `f64` constant.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Widening conversion used when reporting metrics.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable logistic function `1 / (1 + exp(-x))`.
pub fn logistic<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Numerically stable `softplus(x) = ln(1 + exp(x))`.
pub fn softplus<T: Real>(x: T) -> T {
    let zero = T::zero();
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = if x > zero { x } else { zero };
    m + (-(x.abs())).exp().ln_1p()
}

/// Splitmix64-style hash chain for deriving independent RNG seeds from
/// a base seed and a purpose-tag path. Changing any tag decorrelates
/// the stream; identical inputs always produce identical seeds.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        state = state.wrapping_add(t).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Softmax with max-subtraction, written into a fresh vector.
///
/// An empty input yields an empty output; a single entry yields `[1]`.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().cloned().fold(logits[0], T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / total).collect()
}
