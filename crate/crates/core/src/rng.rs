//! Seeded random streams.
//!
//! All randomness derives from one 64-bit seed. Each consumer draws from its
//! own ChaCha stream, so extra draws in one stream never shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Network weight initialization.
    Init = 1,
    /// Regularizer samples, redrawn every epoch.
    Regularizer = 2,
    /// Start states for evaluation rollouts.
    EvalStarts = 3,
}

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
