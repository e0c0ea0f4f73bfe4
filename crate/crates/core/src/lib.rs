//! Two-stage recommender debiasing: VAE-learned confounder representations
//! plus a matrix-factorization model fit against both the plain and the
//! confounded score.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;
pub mod vae;

pub use error::{Error, Result};

/// Derives an independent seed for one purpose (init, sampling, ...) from a
/// user-facing seed, using the splitmix64 finalizer.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
