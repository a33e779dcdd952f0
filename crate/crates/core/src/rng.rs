//! Deterministic random number generation with reproducible stream splitting.
//!
//! Every randomized operation in the crate draws from a [`SeedRng`]. A stream
//! is identified by a 32-byte key; the root key is SHA-256 of the u64 seed,
//! and a child key is SHA-256(parent key || label). Values come from a
//! ChaCha12 stream cipher over that key, so identical (seed, label) paths
//! yield bit-identical sequences on every platform, and sibling streams are
//! statistically independent.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor4;

/// Splittable deterministic generator.
#[derive(Debug, Clone)]
pub struct SeedRng {
    key: [u8; 32],
    rng: ChaCha12Rng,
    /// Cached second half of a Box-Muller pair.
    spare_normal: Option<f64>,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"cardioseg-rng-v1");
        hasher.update(seed.to_le_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self::from_key(key)
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            rng: ChaCha12Rng::from_seed(key),
            spare_normal: None,
        }
    }

    /// Derives an independent child stream. The child depends only on this
    /// stream's key and the label, not on how much of this stream has been
    /// consumed.
    pub fn child(&self, label: &str) -> SeedRng {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update([0u8]);
        hasher.update(label.as_bytes());
        SeedRng::from_key(hasher.finalize().into())
    }

    /// Child stream keyed by an integer, for per-item streams in loops.
    pub fn child_indexed(&self, label: &str, index: u64) -> SeedRng {
        self.child(&format!("{label}#{index}"))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform f64 in [0, 1) with 53 random mantissa bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Log-uniform sample over [lo, hi], both > 0.
    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo > 0.0 && hi >= lo);
        (self.uniform_range(lo.ln(), hi.ln())).exp()
    }

    /// Uniform index in [0, n). Widening-multiply reduction; the bias is
    /// far below anything observable here and the mapping is fixed.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.index(items.len())]
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller; pairs are cached so consecutive calls
    /// consume the underlying stream two uniforms at a time.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so ln is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Tensor of standard-normal samples.
    pub fn normal_tensor(&mut self, shape: [usize; 4]) -> Tensor4 {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor4::new(shape, data).expect("valid shape")
    }
}

/// Convenience: the tensor produced by the stream (seed, label).
pub fn rng_normal(seed: u64, label: &str, shape: [usize; 4]) -> Tensor4 {
    SeedRng::new(seed).child(label).normal_tensor(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_label_bit_identical() {
        let a = rng_normal(7, "a", [1, 1, 2, 2]);
        let b = rng_normal(7, "a", [1, 1, 2, 2]);
        assert_eq!(a, b);
    }

    #[test]
    fn sibling_streams_differ() {
        let a = rng_normal(7, "a", [1, 1, 2, 2]);
        let b = rng_normal(7, "b", [1, 1, 2, 2]);
        assert_ne!(a, b);
    }

    #[test]
    fn child_independent_of_consumption() {
        let root = SeedRng::new(3);
        let c1 = root.clone().child("x").next_u64();
        let mut consumed = root.clone();
        for _ in 0..100 {
            consumed.next_u64();
        }
        assert_eq!(consumed.child("x").next_u64(), c1);
    }

    #[test]
    fn normal_sample_mean_golden() {
        // Law of large numbers at fixed seed; observed value frozen.
        let mut rng = SeedRng::new(42).child("mean-check");
        let n = 1_000_000usize;
        let mean = (0..n).map(|_| rng.normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        // Frozen observed value for regression; recorded from this exact stream.
        assert!((mean - 0.0006207733502286523).abs() < 1e-12, "mean drifted: {mean}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = SeedRng::new(1);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = SeedRng::new(9);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }
}
