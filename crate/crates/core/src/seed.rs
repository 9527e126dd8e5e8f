//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator whose seed is derived from the
//! run seed and a tuple of integer keys with SplitMix64 mixing. Both
//! algorithms are fixed and platform-independent, so a run seed reproduces
//! the same draws everywhere regardless of thread count or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_for(base: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, keys))
}

/// 64-bit FNV-1a, used to key streams by string identifiers.
pub fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

// Stream namespaces, so that e.g. the shuffle of epoch 3 never shares a
// stream with the crop of triplet 3.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_NEGATIVES: u64 = 2;
pub(crate) const STREAM_WINDOWS: u64 = 3;
pub(crate) const STREAM_SHUFFLE: u64 = 4;
pub(crate) const STREAM_CROP: u64 = 5;
pub(crate) const STREAM_DROPOUT: u64 = 6;
pub(crate) const STREAM_SPLITS: u64 = 7;
pub(crate) const STREAM_SYNTH: u64 = 8;
pub(crate) const STREAM_VALIDATION: u64 = 9;
