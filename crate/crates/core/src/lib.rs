//! Desk-scale laboratory for unlearning a named entity from a small language
//! model by steering anchor-windowed hidden states into a low-rank
//! safe-behavior subspace.

pub mod blobfile;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod numkit;
pub mod objectives;
pub mod promptsynth;
pub mod trainer;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent, reproducible random stream for `(seed, tag)`.
pub fn seeded_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
