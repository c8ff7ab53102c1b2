//! Scalar abstraction shared by the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, Mul, Neg, Sub};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the tensors, tape, constraints and repair layers are generic over.
///
/// Implemented for `f32` and `f64`. Everything that reports feasibility down to
/// 1e-12 runs on `f64`; `f32` is supported for cheap forward passes only.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Lossless widening used by serialization and reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Closed-form scalar expressions that can be evaluated either on plain numbers
/// or on tape variables.
///
/// Formulas written against `Expr` (unicycle dynamics, barrier functions,
/// nominal controllers) run unchanged at inference time on `f64` and during
/// training on [`crate::autodiff::Var`], where every operation is recorded.
pub trait Expr<T: Real>:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<T, Output = Self>
    + Sub<T, Output = Self>
    + Mul<T, Output = Self>
{
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl<T: Real> Expr<T> for T {
    #[inline]
    fn sin(self) -> Self {
        Float::sin(self)
    }

    #[inline]
    fn cos(self) -> Self {
        Float::cos(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        Float::sqrt(self)
    }

    #[inline]
    fn recip(self) -> Self {
        Float::recip(self)
    }
}
