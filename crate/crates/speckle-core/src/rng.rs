//! Seed plumbing. Every random draw in the crate flows from an explicit
//! seed through [`seeded`]; sub-seeds for independent streams come from
//! [`derive`], a splitmix64 mix of the base seed and a label.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for a seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed, a purpose label,
/// and a counter (epoch, class id, ...).
pub fn derive(base: u64, label: &str, k: u64) -> u64 {
    let mut acc = base ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k.wrapping_add(1));
    for &b in label.as_bytes() {
        acc = splitmix64(acc ^ u64::from(b));
    }
    splitmix64(acc)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
