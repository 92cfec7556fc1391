//! Scalar abstraction for the circuit math.
//!
//! Circuits, evidence, inference passes and EM are generic over [`Real`], which
//! is implemented for `f32` and `f64`. The harness modules (diffusion, guidance,
//! latent codec) work in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Absolute tolerance for "sums to one" checks on parameters.
    const NORM_TOL: f64;
    /// Absolute tolerance for input-distribution normalization.
    const INPUT_NORM_TOL: f64;

    /// Lossy conversion from `f64`; never fails for finite inputs.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    const NORM_TOL: f64 = 1e-9;
    const INPUT_NORM_TOL: f64 = 1e-12;
}

impl Real for f32 {
    const NORM_TOL: f64 = 1e-5;
    const INPUT_NORM_TOL: f64 = 1e-5;
}

/// `log(Σ exp(x))` with a max shift; `-inf` when every term is `-inf`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    if m == T::infinity() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}
