//! Counter-based random streams.
//!
//! Every random draw in the toolkit comes from a stream keyed by
//! `(seed, index, purpose)`, so any scene or split can be regenerated on its
//! own and parallel generation does not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Scene,
    Split,
    Init,
    Order,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Scene => 0x5343_454e,
            Purpose::Split => 0x5350_4c54,
            Purpose::Init => 0x494e_4954,
            Purpose::Order => 0x4f52_4452,
            Purpose::Test => 0x5445_5354,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds the stream for `(seed, index, purpose)`.
pub fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let words = [
        splitmix64(seed),
        splitmix64(index ^ 0xa5a5_a5a5_a5a5_a5a5),
        splitmix64(purpose.tag()),
        splitmix64(seed ^ index.rotate_left(32) ^ purpose.tag()),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
