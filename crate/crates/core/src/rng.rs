//! Seed derivation for independent replica streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every stream in the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, index, salt)`.
///
/// Distinct salts give unrelated streams for the same replica (solver
/// directions, environment noise, loss scripts).
pub fn derive_seed(master: u64, index: u64, salt: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(index)) ^ splitmix64(salt.wrapping_add(0x5851_F42D)))
}

pub fn stream(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub const SALT_SOLVER: u64 = 1;
pub const SALT_NOISE: u64 = 2;
pub const SALT_LOSSES: u64 = 3;
pub const SALT_REPLICA: u64 = 4;
