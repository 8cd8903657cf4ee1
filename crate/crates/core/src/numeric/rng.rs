//! Deterministic RNG substreams.
//!
//! Every randomized routine takes `(seed, stream)` pairs instead of threading
//! one generator through the program, so results do not depend on evaluation
//! order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// An independent generator for logical stream `stream` of the run seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Substream keyed by `(stream, chunk)`, used to sample fixed-size chunks in
/// parallel with results independent of the worker layout.
pub fn chunk_substream(seed: u64, stream: u64, chunk: u64) -> ChaCha12Rng {
    // Streams are 64-bit; fold the chunk index in with a large odd constant.
    substream(seed, stream ^ chunk.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Derive an independent seed for a tagged sub-task (splitmix64 step).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
