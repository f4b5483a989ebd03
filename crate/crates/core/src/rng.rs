//! Deterministic random streams.
//!
//! Every random decision in the crate draws from a ChaCha stream keyed by
//! the run seed plus a list of tags (stage, epoch, batch, item, ...), so a
//! given decision never depends on how many draws happened elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = splitmix64(seed);
    for &tag in tags {
        key = splitmix64(key ^ splitmix64(tag.wrapping_add(0x5EED)));
    }
    ChaCha8Rng::seed_from_u64(key)
}

pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const LAMBDA: u64 = 3;
    pub const PARTNER: u64 = 4;
    pub const FEW_SHOT: u64 = 5;
    pub const GRAD_CHECK: u64 = 6;
    pub const SYNTH: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
