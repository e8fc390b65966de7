//! Seeded random streams. Every random draw in the crate goes through a
//! ChaCha8 generator so runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a list of labels into a new independent seed
/// (splitmix64 finalizer applied per label).
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut x = base;
    for &l in labels {
        x = mix(x ^ mix(l.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
