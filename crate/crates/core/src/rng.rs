//! Seed derivation. Every stochastic component gets its own ChaCha stream so
//! that adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Env,
    Act,
    Replay,
    Diagnostics,
    Worker(u32),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Env => 2,
            Stream::Act => 3,
            Stream::Replay => 4,
            Stream::Diagnostics => 5,
            Stream::Worker(w) => 0x100 + u64::from(w),
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    // splitmix64 finalizer over (seed, tag)
    let mut z = seed
        .wrapping_add(which.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
