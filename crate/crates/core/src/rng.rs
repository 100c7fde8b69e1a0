//! Seeded random streams.
//!
//! Every source of randomness derives from one 64-bit experiment seed and a
//! named purpose, so changing how much one component draws never shifts the
//! numbers seen by another. Per-item streams (one per test image, say) make
//! results independent of evaluation order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    Dropout = 4,
    Data = 5,
    Attack = 6,
}

const INDEX_BITS: u32 = 40;

/// Generator for `(seed, purpose, index)`. `index` must stay below 2^40.
pub fn substream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << INDEX_BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | index);
    rng
}
