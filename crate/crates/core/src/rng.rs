//! Seed derivation shared by initialization and data generation.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, label,
//! index)`, so results never depend on the order in which items are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to turn labels and parameter names into stream ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for item `index` of the stream `label`.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(label.as_bytes())));
    rng.set_stream(index);
    rng
}
