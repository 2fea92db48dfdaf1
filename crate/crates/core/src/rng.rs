//! Counter-based random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! plus a tuple of counters (step, prompt slot, sample index, ...). Results are
//! therefore independent of the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a list of counters into a single 64-bit seed.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, parts))
}

/// Stream tags keep unrelated consumers of the same counters apart.
pub mod tag {
    pub const ROLLOUT: u64 = 0x726f_6c6c;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const PROMPTS: u64 = 0x7072_6f6d;
    pub const INIT_POLICY: u64 = 0x696e_6974;
    pub const INIT_CRITIC: u64 = 0x6372_6974;
    pub const INSTANCES: u64 = 0x696e_7374;
    pub const TURN: u64 = 0x7475_726e;
}
