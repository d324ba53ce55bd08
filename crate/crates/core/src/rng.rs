//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a tuple of integers, so runs are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes several integers into one well-spread seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5851_f42d_4c95_7f2d, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from(parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
