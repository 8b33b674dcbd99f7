//! Seed derivation.
//!
//! One run seed fans out to per-stage seeds with the splitmix64 finalizer:
//! `stage_seed = splitmix64(run_seed ^ splitmix64(tag))`, where `tag` is a
//! fixed 64-bit constant per stage. Every stage can be replayed in isolation
//! from its derived seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random generator used everywhere. ChaCha8 is portable across platforms.
pub type Rng = ChaCha8Rng;

pub const STAGE_CORPUS: u64 = 0x636f_7270_7573;
pub const STAGE_SPLIT: u64 = 0x0073_706c_6974;
pub const STAGE_TRAIN_TASKS: u64 = 0x7472_6e5f_7461_736b;
pub const STAGE_TEST_TASKS: u64 = 0x7473_745f_7461_736b;
pub const STAGE_INIT: u64 = 0x696e_6974;
pub const STAGE_TRAIN: u64 = 0x0074_7261_696e;
pub const STAGE_PARTITION: u64 = 0x7061_7274;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
