//! Named random streams derived from a single seed.
//!
//! Every subsystem (corpus generation, noise injection, parameter init,
//! batching) draws from its own ChaCha stream so it can be replayed in
//! isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, stable across platforms and toolchains.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// RNG for stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// RNG for stream `name` at a given index (e.g. epoch).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{name}/{index}"))
}
