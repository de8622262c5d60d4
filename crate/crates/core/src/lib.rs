//! Numerical core for two-stage temporal super-resolution of 4D volumetric
//! sequences.
//!
//! Stage one generates intermediate frames of each 2D+t slice sequence with a
//! boundary-conditioned diffusion model (a token transformer predicting the
//! injected noise). Stage two reassembles the generated slices into 3D volumes
//! and refines them with residual tri-directional selective-scan blocks.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! files and the command-line front end live in the companion `tssc` crate.
//!
//! Index order for 4D data is `(t, z, y, x)`, row-major, everywhere.

#![no_std]
#![forbid(unsafe_code)]
// NaN must fail the range checks, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

extern crate alloc;

pub mod denoiser;
pub mod engine;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod real;
pub mod rng;
pub mod scan;
pub mod schedule;
pub mod synthetic;
pub mod tensor;
pub mod tridir;
pub mod volume;

mod error;

pub use error::{Error, Result};
pub use real::Real;
