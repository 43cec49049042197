//! Seeded random streams.
//!
//! Every stochastic decision draws from a stream keyed by the run seed, a
//! purpose tag and a tuple of indices (step, batch position, ...). Streams
//! never share state, so enabling or disabling one component leaves the
//! draws of every other component untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    LabeledOrder = 2,
    UnlabeledOrder = 3,
    WeakAug = 4,
    Photometric = 5,
    PosAug = 6,
    MixPartner = 7,
    Mix = 8,
    Sample = 9,
    Subset = 10,
    Split = 11,
    Augshow = 12,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed, a tag and any number of indices into a 64-bit key.
pub fn derive_key(seed: u64, tag: Stream, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5EED_0000_0000_0000);
    h = splitmix64(h ^ (tag as u64));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(seed: u64, tag: Stream, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_key(seed, tag, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Stream::Mix, &[1, 2]).gen();
        let b: u64 = stream(7, Stream::Mix, &[1, 2]).gen();
        let c: u64 = stream(7, Stream::Mix, &[2, 1]).gen();
        let d: u64 = stream(7, Stream::PosAug, &[1, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
