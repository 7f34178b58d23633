//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`),
//! seeded with the run seed and switched to a fixed stream id per consumer,
//! so adding draws to one consumer never perturbs another. Bounded integers
//! use [`uniform_index`], which is specified exactly so that other
//! implementations can reproduce splits and samples bit for bit.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    CodebookP = 2,
    CodebookQ = 3,
    Scorer = 4,
    Sampler = 5,
    Shuffle = 6,
    FullTable = 7,
    Synthetic = 8,
}

/// ChaCha8 seeded via `seed_from_u64(seed)` and moved to `stream`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Uniform integer in `[0, n)`.
///
/// Draws `next_u64` until the value falls below the largest multiple of `n`
/// representable in a u64, then reduces modulo `n`.
pub fn uniform_index(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "uniform_index on empty range");
    let n = n as u64;
    let limit = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < limit {
            return (x % n) as usize;
        }
    }
}

/// Uniform f64 in `[0, 1)` from the top 53 bits of `next_u64`.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// In-place Fisher–Yates shuffle, walking `i` from the end down to 1 and
/// swapping with `uniform_index(i + 1)`.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}
