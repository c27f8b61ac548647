//! Deterministic RNG streams keyed by `(seed, epoch, index)`, so results
//! never depend on iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Augment = 2,
    Mixup = 3,
    Synthetic = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, epoch: u64, index: u64) -> ChaCha8Rng {
    let k = splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ epoch);
    ChaCha8Rng::seed_from_u64(splitmix(k ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}
