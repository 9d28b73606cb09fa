//! Keyed random streams.
//!
//! Every stochastic choice in a run draws from a stream derived from
//! `(seed, purpose, key...)`, never from a shared generator. Two runs with the
//! same seeds therefore consume identical random numbers no matter how client
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. The discriminant is mixed into the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    GlobalInit = 1,
    ClientInit = 2,
    TrainNegatives = 3,
    EvalNegatives = 4,
    ClientSampling = 5,
    Shuffle = 6,
    LaplaceNoise = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent generator for `(seed, purpose, keys)`.
pub fn stream(seed: u64, purpose: Purpose, keys: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed ^ splitmix64(purpose as u64));
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut bytes = [0u8; 32];
    let mut s = h;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
