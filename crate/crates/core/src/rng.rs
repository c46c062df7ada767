//! Seed splitting: every consumer draws from its own ChaCha stream derived
//! from the single experiment seed, so adding draws in one module never
//! shifts the random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Well-known stream identifiers.
pub mod streams {
    pub const INITIAL_BIAS: u64 = 1;
    pub const GYRO_NOISE: u64 = 2;
    pub const BIAS_WALK: u64 = 3;
    pub const JOINT_NOISE: u64 = 4;
    pub const CALIBRATION_MOTION: u64 = 5;
    pub const CONTROL: u64 = 6;
    pub const MISALIGNMENT: u64 = 7;
}

pub fn stream(seed: u64, id: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
