//! Seed derivation so every random stream is a pure function of
//! (run seed, step, item) and independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_D1FF_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

// Stream domains, kept distinct so derived streams never collide.
pub(crate) const DOMAIN_SHUFFLE: u64 = 1;
pub(crate) const DOMAIN_STEP: u64 = 2;
pub(crate) const DOMAIN_EXAMPLE: u64 = 3;
pub(crate) const DOMAIN_CANDIDATE: u64 = 4;
pub(crate) const DOMAIN_INIT: u64 = 5;
pub(crate) const DOMAIN_SYNTH: u64 = 6;
