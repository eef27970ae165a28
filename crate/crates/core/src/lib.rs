//! Missing-value imputation for tabular data.
//!
//! The core method is [`generative::GenerativeImputer`]: a Gaussian encoder
//! `z | x` and a Gaussian/Bernoulli decoder `x | z`, trained by alternating
//! fixed-point imputation of the masked cells with stochastic-gradient steps on
//! a variational lower bound. The crate also carries the MNAR mask generator,
//! classical baselines, metrics and a reproducible benchmark harness.

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generative;
pub mod harness;
pub mod missingness;
pub mod nn;
pub mod synthetic;

pub use error::{ErrorKind, ImputeError, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in the crate; portable across platforms and versions.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a salt.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
