//! Seed derivation for independent, stateless random streams.
//!
//! Every random draw in training and generation comes from a ChaCha stream
//! keyed by `(seed, purpose, indices...)`, so results never depend on how
//! many draws an unrelated component consumed before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purposes that key independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Noise = 3,
    Masking = 4,
    Gaussian = 5,
    Generator = 6,
    Scene = 7,
    Question = 8,
    Split = 9,
    Jitter = 10,
    Pgd = 11,
    Eval = 12,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a purpose and any number of indices.
pub fn derive(seed: u64, purpose: Purpose, parts: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(purpose as u64));
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(seed, purpose, parts))
}
