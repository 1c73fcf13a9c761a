//! Deterministic seed derivation so that parallel tasks reproduce the
//! sequential stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TaskRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for task `index` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn task_rng(master: u64, stream: u64, index: u64) -> TaskRng {
    TaskRng::seed_from_u64(derive_seed(master, stream, index))
}

/// Named streams keep unrelated consumers of one master seed independent.
pub mod stream {
    pub const LIBRARY: u64 = 1;
    pub const ROUNDING: u64 = 2;
    pub const SUBSET: u64 = 3;
    pub const LOADS: u64 = 4;
    pub const METERS: u64 = 5;
    pub const TRIAL: u64 = 6;
    pub const STATES: u64 = 7;
    pub const PLACEMENT: u64 = 8;
    pub const PROFILE: u64 = 9;
    pub const BASE_LOADS: u64 = 10;
}
