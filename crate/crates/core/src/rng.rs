use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The only RNG type used in the crate. ChaCha output is stable across
/// platforms and releases, which keeps seeded runs byte-reproducible.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named purpose, so that consuming
/// draws in one stream never shifts another.
pub(crate) fn substream(seed: u64, purpose: &str, index: u64) -> SeededRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes().chain(index.to_le_bytes()).chain(seed.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}
