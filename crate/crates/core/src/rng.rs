//! Seed derivation. Every parallel task gets its own stream derived from the
//! master seed and a task counter, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for task `counter` under `master`.
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(counter.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, counter: u64) -> Rng {
    rng_from(derive_seed(master, counter))
}
