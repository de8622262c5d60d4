//! Seeded random sources.
//!
//! Every stochastic operation takes its generator from the caller. Training
//! loops derive one independent ChaCha stream per step (or per slice) from the
//! run seed, so results do not depend on scheduling or thread count.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

pub type SeededRng = ChaCha8Rng;

/// Generator for stream `stream` of run `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec<F: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<F> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z)
        })
        .collect()
}

/// Packs a few small indices into a stream id.
pub fn stream_id(tag: u8, a: u64, b: u64) -> u64 {
    ((tag as u64) << 56) ^ (a << 28) ^ b
}
