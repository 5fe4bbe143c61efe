//! Seed derivation for every instance stream a run draws from.

use crate::error::Result;
use crate::numerics::Rng;
use crate::tasks::{generate, TaskConfig, TaskInstance};

pub const SALT_INIT: u64 = 0x1001;
pub const SALT_TRAIN: u64 = 0x2002;
pub const SALT_RATIO: u64 = 0x3003;
pub const SALT_PROBE: u64 = 0x4004;
pub const SALT_EVAL: u64 = 0x5005;

/// Generator for item `index` of the stream `(seed, salt)`.
pub fn stream_rng(seed: u64, salt: u64, index: u64) -> Rng {
    Rng::new(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).split(index)
}

pub fn instance(task: &TaskConfig, vocab_size: usize, seed: u64, salt: u64, index: u64) -> Result<TaskInstance> {
    generate(task, vocab_size, &mut stream_rng(seed, salt, index))
}

pub fn instance_set(task: &TaskConfig, vocab_size: usize, seed: u64, salt: u64, count: usize) -> Result<Vec<TaskInstance>> {
    (0..count as u64).map(|i| instance(task, vocab_size, seed, salt, i)).collect()
}
