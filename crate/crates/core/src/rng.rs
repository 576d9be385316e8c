//! Seeded RNG streams.
//!
//! All randomness in the library flows through ChaCha8 streams derived from a
//! single experiment seed plus a purpose tag and stream indices. Keying
//! streams by (seed, purpose, a, b) instead of drawing from one shared
//! generator makes parallel data loading and checkpoint resume reproduce the
//! sequential schedule exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams. Values are part of the on-disk
/// determinism contract: changing them changes every derived stream.
#[derive(Debug, Clone, Copy)]
pub enum StreamKind {
    ParamInit = 1,
    Shuffle = 2,
    Augment = 3,
    Dropout = 4,
    Synth = 5,
    Split = 6,
}

/// Derives an independent ChaCha8 stream from the experiment seed.
///
/// `a` and `b` are purpose-specific indices, e.g. (sample, epoch) for
/// augmentation or (epoch, batch) for dropout.
pub fn stream(seed: u64, kind: StreamKind, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(kind as u64).to_le_bytes());
    key[16..24].copy_from_slice(&mix(a).to_le_bytes());
    key[24..32].copy_from_slice(&mix(b).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

// splitmix64 finalizer; decorrelates small consecutive indices.
fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a1 = stream(7, StreamKind::Augment, 3, 0);
        let mut a2 = stream(7, StreamKind::Augment, 3, 0);
        let mut b = stream(7, StreamKind::Augment, 4, 0);
        let x1: f64 = a1.gen();
        let x2: f64 = a2.gen();
        let y: f64 = b.gen();
        assert_eq!(x1, x2);
        assert_ne!(x1, y);
    }
}
