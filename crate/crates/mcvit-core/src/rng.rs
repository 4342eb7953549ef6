//! Seeded, splittable, counter-based random number generator.
//!
//! Draw `i` is a pure function of `(key, i)` (a SplitMix64-style finalizer
//! over the keyed counter), so a given seed yields the same sequence on every
//! platform and run, and child generators split off a parent are independent
//! streams rather than reorderings of the parent's.

use alloc::vec::Vec;

use crate::fm;
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLIT_DOMAIN: u64 = 0xA0761D6478BD642F;

#[inline]
fn mix(z: u64) -> u64 {
    let mut z = z;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SplitRng {
    key: u64,
    counter: u64,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        SplitRng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Child stream for `tag`; does not advance or depend on this
    /// generator's position, so split order cannot reorder draws.
    pub fn split(&self, tag: u64) -> SplitRng {
        SplitRng {
            key: mix(self.key ^ SPLIT_DOMAIN ^ tag.wrapping_mul(GOLDEN)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        fm::sqrt(-2.0 * fm::ln(u1)) * fm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>, sigma: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal() * sigma).collect();
        Tensor::new(shape, data).expect("normal_tensor shape")
    }

    /// `k` distinct indices from [0, n), uniform without replacement,
    /// returned in ascending order. Partial Fisher-Yates.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SplitRng::new(42);
        let mut b = SplitRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = SplitRng::new(1);
        let mut b = SplitRng::new(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn split_is_position_independent() {
        let mut a = SplitRng::new(7);
        let b = SplitRng::new(7);
        let _ = a.next_u64();
        let _ = a.next_u64();
        // Splitting after draws must give the same child as splitting fresh.
        let mut child_a = a.split(3);
        let mut child_b = b.split(3);
        for _ in 0..10 {
            assert_eq!(child_a.next_u64(), child_b.next_u64());
        }
    }

    #[test]
    fn uniform_in_range() {
        let mut rng = SplitRng::new(5);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn sample_without_replacement_distinct_sorted() {
        let mut rng = SplitRng::new(8);
        for _ in 0..50 {
            let s = rng.sample_without_replacement(16, 7);
            assert_eq!(s.len(), 7);
            for w in s.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn sample_all_is_identity() {
        let mut rng = SplitRng::new(8);
        let s = rng.sample_without_replacement(9, 9);
        assert_eq!(s, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn index_covers_range() {
        let mut rng = SplitRng::new(13);
        let mut seen = [false; 8];
        for _ in 0..500 {
            seen[rng.index(8)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
