//! Named random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Split = 4,
}

/// Generator for `stream` under `seed`. Streams never overlap, so changing
/// how many draws one component makes leaves the others untouched.
pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// A plain `u64` seed for APIs that take one (for example per-epoch shuffles).
pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    use rand::RngCore;
    let mut r = rng(seed, stream);
    r.set_word_pos(u128::from(index) * 2);
    r.next_u64()
}
