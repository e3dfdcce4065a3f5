//! Counter-based random streams.
//!
//! Every consumer derives its own generator from `(run_seed, stream, index)`,
//! so data order, initialization and task sampling stay reproducible
//! independently of each other and of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for stream `name`, instance `index`, of run `seed`.
pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let words = [
        splitmix(seed),
        splitmix(fnv1a(name.as_bytes())),
        splitmix(index ^ 0x5851_f42d_4c95_7f2d),
        splitmix(seed ^ index.rotate_left(32)),
    ];
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// A seed for a nested stream family, e.g. one per shard or per stage.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(name.as_bytes())) ^ index)
}
