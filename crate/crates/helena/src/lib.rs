//! Lightweight attention-based channel estimation for 5G-NR OFDM grids.
//!
//! The crate is self-contained: a dense tensor type with reverse-mode
//! automatic differentiation, the neural network layers built on it, a
//! tapped-delay-line channel simulator that produces training data, and the
//! training and evaluation loops that tie them together.
//!
//! Everything is deterministic given a seed. The same seed, configuration,
//! and thread count reproduce every artifact byte for byte.

pub mod chansim;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

use rand_chacha::rand_core::SeedableRng;

/// A ChaCha generator on stream `stream` of `seed`'s keystream. Different
/// streams under one seed are statistically independent, which lets one
/// sample seed drive channel fading, pilot symbols, and noise without any
/// coupling between them.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
