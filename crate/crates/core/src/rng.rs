// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness. Every stochastic component derives its generator from a
//! user seed plus a fixed stream label so unrelated components never share a
//! sequence.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type DetRng = ChaCha8Rng;

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut DetRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn unit_vector(rng: &mut DetRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = crate::math::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut DetRng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn shuffle<T>(rng: &mut DetRng, items: &mut [T]) {
    items.shuffle(rng);
}

/// `count` distinct indices from `0..n`, in draw order.
pub fn sample_without_replacement(rng: &mut DetRng, n: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn without_replacement_is_distinct_and_in_range() {
        let mut rng = stream(3, 0);
        for _ in 0..200 {
            let mut s = sample_without_replacement(&mut rng, 40, 8);
            assert!(s.iter().all(|&i| i < 40));
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 8);
        }
        let mut all = sample_without_replacement(&mut rng, 10, 10);
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, 1).random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = stream(7, 1).random();
        let y: u64 = stream(7, 2).random();
        assert_ne!(x, y);
    }
}
