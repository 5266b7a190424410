//! Named random streams derived from one experiment seed.
//!
//! Every consumer of randomness (parameter init per node, the labeled
//! sampler, the unlabeled sampler, augmentation per step) draws from its own
//! ChaCha stream. Adding or removing one consumer never shifts the numbers
//! another one sees, which is what makes a run with an empty contrastive set
//! replay the plain supervised run exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Rng for the stream called `label` under `seed`.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes(), FNV_OFFSET));
    rng
}

/// Rng for step `index` of the stream called `label`; independent of how
/// many numbers earlier steps consumed.
pub fn indexed_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = fnv1a(&index.to_le_bytes(), fnv1a(label.as_bytes(), FNV_OFFSET));
    rng.set_stream(stream);
    rng
}
