//! Seed derivation and the deterministic RNG used everywhere.
//!
//! All stochastic code takes a [`Rng`] seeded through [`rng_from_seed`] or
//! [`derive_seed`]; reruns with the same seed are bitwise identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide RNG. ChaCha gives a platform-independent stream.
pub type Rng = ChaCha8Rng;

/// Build an RNG from a bare seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-stream seed, e.g. per sample or per batch
/// element. `derive_seed(s, a) != derive_seed(s, b)` for `a != b`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(base ^ mix(stream))
}
