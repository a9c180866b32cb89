//! Named, replayable random streams.
//!
//! Every random decision derives from the single run seed. Each consumer asks
//! for its own stream (`"coseg"`, `"sampling"`, `"paste"`, `"init"`, ...) so
//! that turning one feature off never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream `name` of run `seed`, optionally split further by `index`
/// (an epoch, an image ordinal, ...).
pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}

/// Stable 64-bit digest of a string (image ids, prompts, ...).
pub fn digest(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}
