//! Seed derivation. Every stochastic component draws from a ChaCha8 stream
//! whose seed is derived from the root seed and a fixed component label, so
//! runs are reproducible regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `label` of `root`.
pub fn derive_seed(root: u64, label: u64) -> u64 {
    splitmix64(root ^ splitmix64(label.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(root: u64, label: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
