//! Deterministic random streams for weight sampling and DP noise.
//!
//! Every source of randomness in training is an explicit [`RngStream`] so that
//! a run is reproducible from its seed alone. Streams can be forked into
//! statistically independent children (data shuffling, noise, and evaluation
//! each get their own), and every stream counts how many values it has handed
//! out, which makes "the same noise was drawn" arguments checkable in tests.

#[allow(unused_imports)]
use num_traits::Float;

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// Multiplies state mixing into fork seeds; the splitmix64 finalizer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seeded, forkable stream of uniform and Gaussian variates.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha12Rng,
    seed: u64,
    draws: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    /// Creates a stream from a 64-bit seed.
    pub fn seed_from(seed: u64) -> Self {
        RngStream {
            rng: ChaCha12Rng::seed_from_u64(seed),
            seed,
            draws: 0,
            spare_normal: None,
        }
    }

    /// Derives an independent child stream; distinct labels give distinct
    /// children, and the parent's own sequence is not advanced.
    pub fn fork(&self, label: u64) -> Self {
        let child_seed = splitmix64(splitmix64(self.seed) ^ splitmix64(label.wrapping_add(1)));
        RngStream::seed_from(child_seed)
    }

    /// Seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of variates handed out so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection; `bound` must be nonzero.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        self.draws += 1;
        // Rejection zone keeps the result exactly uniform.
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal via Box-Muller, caching the paired variate.
    pub fn standard_normal(&mut self) -> f64 {
        self.draws += 1;
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = core::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Normal with the given mean and standard deviation.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Fills a slice with independent `N(mean, std^2)` variates.
    pub fn fill_normal(&mut self, out: &mut [f64], mean: f64, std: f64) {
        for v in out.iter_mut() {
            *v = self.normal(mean, std);
        }
    }

    /// Fisher-Yates shuffle of an index slice.
    pub fn shuffle(&mut self, indices: &mut [usize]) {
        for i in (1..indices.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            indices.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::seed_from(42);
        let mut b = RngStream::seed_from(42);
        for _ in 0..100 {
            assert_eq!(a.standard_normal(), b.standard_normal());
            assert_eq!(a.uniform(), b.uniform());
        }
        assert_eq!(a.draws(), 200);
    }

    #[test]
    fn forks_are_distinct_and_deterministic() {
        let parent = RngStream::seed_from(7);
        let mut c1 = parent.fork(0);
        let mut c2 = parent.fork(1);
        let mut c1_again = parent.fork(0);
        let x1 = c1.standard_normal();
        assert_ne!(x1, c2.standard_normal());
        assert_eq!(x1, c1_again.standard_normal());
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = RngStream::seed_from(1234);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn below_is_in_range_and_covers_values() {
        let mut rng = RngStream::seed_from(5);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = rng.below(7) as usize;
            assert!(v < 7);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::seed_from(9);
        let mut idx: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut idx);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(idx, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn scaled_normal_hits_requested_moments() {
        let mut rng = RngStream::seed_from(77);
        let mut buf = vec![0.0; 50_000];
        rng.fill_normal(&mut buf, 3.0, 0.5);
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        let var = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / buf.len() as f64;
        assert!((mean - 3.0).abs() < 0.01, "mean {mean}");
        assert!((var - 0.25).abs() < 0.01, "var {var}");
    }
}
