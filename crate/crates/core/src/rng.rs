//! Seeded PRNG shared by initialization, shuffling and data synthesis.
//!
//! xoshiro256** seeded through splitmix64, so a `u64` seed yields the same
//! stream on every platform.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Fisher–Yates shuffle driven by `rng`.
pub fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    use rand::Rng as _;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
