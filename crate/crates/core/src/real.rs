//! Floating point scalar abstraction.
//!
//! Networks, losses and scans are generic over [`Real`] so the same code runs
//! in 32-bit for training and inference and in 64-bit for gradient checks.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting an `f64` literal into `F`.
#[inline]
pub fn lit<F: Real>(v: f64) -> F {
    F::from_f64(v)
}

#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    // log(1 + e^x) without overflow for large x
    if x > lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let inner = lit::<F>(GELU_K) * (x + lit::<F>(GELU_C) * x * x * x);
    lit::<F>(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let k = lit::<F>(GELU_K);
    let c = lit::<F>(GELU_C);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let sech2 = F::one() - th * th;
    lit::<F>(0.5) * (F::one() + th) + lit::<F>(0.5) * x * sech2 * k * (F::one() + lit::<F>(3.0) * c * x * x)
}
