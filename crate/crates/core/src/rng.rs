//! Seeded random streams.
//!
//! Every random draw in the crate goes through a ChaCha8 generator keyed by a
//! 64-bit seed (expanded with `rand_core`'s `seed_from_u64`) and a stream id
//! selecting an independent ChaCha stream. ChaCha is counter based, so a
//! `(seed, stream)` pair reproduces the same sequence on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream ids used for the different consumers of a single user seed.
pub mod streams {
    pub const MASK: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DATASET: u64 = 6;
}

/// Build the generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed from `seed` and a path of integers (SplitMix64 mixing).
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |h, &p| mix(h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Map a raw 64-bit draw onto `0..n` by the multiply-high method.
///
/// The bias is below `n / 2^64` and the mapping needs no rejection loop,
/// which keeps the number of draws per call fixed at one.
pub fn index_below(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Standard normal truncated to `[-2, 2]` by rejection.
pub fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let x = normal(rng);
        if x.abs() <= 2.0 {
            return x;
        }
    }
}

/// Uniform in `[0, 1)`.
pub fn unit(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = index_below(rng, i + 1);
        p.swap(i, j);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, 1).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(stream(7, 1).next_u64(), stream(7, 2).next_u64());
        assert_ne!(stream(7, 1).next_u64(), stream(8, 1).next_u64());
    }

    #[test]
    fn index_below_stays_in_range() {
        let mut rng = stream(0, 0);
        for n in 1..50 {
            for _ in 0..100 {
                assert!(index_below(&mut rng, n) < n);
            }
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = permutation(&mut stream(3, 5), 100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
