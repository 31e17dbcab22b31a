//! Deterministic random number generation.
//!
//! A small self-contained xoshiro256** generator seeded through splitmix64.
//! Determinism is part of the engine contract: the same seed and the same
//! call sequence produce bit-identical values on every run, and independent
//! substreams (weight init, shuffling, sampling noise) are derived from the
//! root seed so that adding draws to one stream never perturbs another.

use alloc::vec::Vec;

use num_traits::Float;

use crate::scalar::Scalar;

/// Substream label: model parameter initialization.
pub const STREAM_WEIGHTS: u64 = 0x01;
/// Substream label: dataset shuffling.
pub const STREAM_SHUFFLE: u64 = 0x02;
/// Substream label: sampling noise (reparameterization).
pub const STREAM_NOISE: u64 = 0x03;
/// Substream label: phantom geometry and intensities.
pub const STREAM_PHANTOM: u64 = 0x04;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seeded generator with derivable substreams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, s }
    }

    /// Seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent substream. Based on the root seed, not the
    /// current state, so substreams are insensitive to how many values
    /// have been drawn from their parent.
    pub fn substream(&self, label: u64) -> Rng {
        let mut sm = self.seed ^ label.wrapping_mul(0xd1342543de82ef95);
        Rng::new(splitmix64(&mut sm))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a logarithm argument.
    #[inline]
    fn open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Consumes exactly two draws.
    pub fn normal_f64(&mut self) -> f64 {
        let u1 = self.open_f64();
        let u2 = self.uniform_f64();
        let r = Float::sqrt(-2.0 * Float::ln(u1));
        r * Float::cos(core::f64::consts::TAU * u2)
    }

    pub fn normal<E: Scalar>(&mut self, mean: f64, std: f64) -> E {
        E::from_f64(mean + std * self.normal_f64())
    }

    pub fn uniform<E: Scalar>(&mut self, lo: f64, hi: f64) -> E {
        E::from_f64(lo + (hi - lo) * self.uniform_f64())
    }

    pub fn fill_normal<E: Scalar>(&mut self, buf: &mut [E], mean: f64, std: f64) {
        for v in buf {
            *v = self.normal(mean, std);
        }
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform integer in [lo, hi).
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Seeded permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// Full state for checkpointing: seed followed by the stream words.
    pub fn state(&self) -> [u64; 5] {
        [self.seed, self.s[0], self.s[1], self.s[2], self.s[3]]
    }

    pub fn from_state(state: [u64; 5]) -> Rng {
        Rng {
            seed: state[0],
            s: [state[1], state[2], state[3], state[4]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_are_independent_of_parent_position() {
        let parent = Rng::new(7);
        let before: Vec<u64> = {
            let mut s = parent.substream(STREAM_NOISE);
            (0..8).map(|_| s.next_u64()).collect()
        };
        let mut advanced = parent.clone();
        for _ in 0..100 {
            advanced.next_u64();
        }
        let after: Vec<u64> = {
            let mut s = advanced.substream(STREAM_NOISE);
            (0..8).map(|_| s.next_u64()).collect()
        };
        assert_eq!(before, after);
    }

    #[test]
    fn distinct_labels_give_distinct_streams() {
        let root = Rng::new(3);
        let a = root.substream(STREAM_WEIGHTS).next_u64();
        let b = root.substream(STREAM_SHUFFLE).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(11);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = rng.normal_f64();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn permutation_is_bijection() {
        let mut rng = Rng::new(5);
        let mut p = rng.permutation(257);
        p.sort_unstable();
        assert_eq!(p, (0..257).collect::<Vec<_>>());
    }

    #[test]
    fn state_roundtrip_resumes_stream() {
        let mut rng = Rng::new(9);
        for _ in 0..17 {
            rng.next_u64();
        }
        let mut restored = Rng::from_state(rng.state());
        for _ in 0..32 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }
}
