//! Named, stable sub-seed derivation.
//!
//! A single experiment seed fans out into independent streams (scene, sampling,
//! init, dropout, shuffle, ...) so that changing one stage does not perturb the
//! random draws of another. Derivation is FNV-1a over the tag bytes mixed with
//! the parent seed; it is stable across platforms and compiler versions, unlike
//! `std::hash`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Stable 64-bit digest of arbitrary bytes, e.g. for config fingerprints.
pub fn digest(bytes: &[u8]) -> u64 {
    fnv1a(bytes, FNV_OFFSET)
}

/// Derive a child seed from `(seed, tag)`.
pub fn subseed(seed: u64, tag: &str) -> u64 {
    let h = fnv1a(&seed.to_le_bytes(), FNV_OFFSET);
    fnv1a(tag.as_bytes(), h)
}

/// Derive a child seed from `(seed, tag, index)`, e.g. per-sample streams.
pub fn subseed_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    fnv1a(&index.to_le_bytes(), subseed(seed, tag))
}

/// RNG for a named stream.
pub fn rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(seed, tag))
}

/// RNG for a named, indexed stream.
pub fn rng_indexed(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed_indexed(seed, tag, index))
}
