//! Counter-addressed random streams.
//!
//! A stream is the ChaCha8 keystream for a 64-bit seed, addressed by a
//! counter of 64-bit words already consumed. `(seed, counter)` fully
//! determines every subsequent draw on every platform. Gaussian draws use
//! the Box–Muller transform evaluated with `libm`, which is portable
//! software floating point rather than the host math library.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    core: ChaCha8Rng,
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.counter == other.counter
    }
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    /// The stream for `seed`, positioned after `counter` words.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_word_pos(counter as u128 * 2);
        RngStream {
            seed,
            counter,
            core,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// An independent stream keyed by this stream's seed and `tag`.
    /// Does not advance `self`.
    pub fn fork(&self, tag: u64) -> RngStream {
        RngStream::new(mix64(self.seed ^ mix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.core.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (unbiased, by rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Pair of independent standard normals from two words.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn fill_normal(&mut self, out: &mut [f64], sigma: f64) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = sigma * a;
            pair[1] = sigma * b;
        }
        if let [last] = chunks.into_remainder() {
            *last = sigma * self.normal();
        }
    }

    /// Tensor of i.i.d. `N(0, sigma²)` draws.
    pub fn gaussian<T: Scalar>(&mut self, shape: [usize; 4], sigma: f64) -> Tensor<T> {
        gaussian(self, shape, sigma)
    }
}

/// Tensor of i.i.d. `N(0, sigma²)` draws; `sigma = 0` gives exact zeros.
pub fn gaussian<T: Scalar>(stream: &mut RngStream, shape: [usize; 4], sigma: f64) -> Tensor<T> {
    assert!(sigma >= 0.0, "negative sigma");
    let n: usize = shape.iter().product();
    let mut buf = vec![0.0; n];
    stream.fill_normal(&mut buf, sigma);
    if sigma == 0.0 {
        // avoid -0.0 from sign of the draw
        buf.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::from_vec(shape, buf.into_iter().map(T::lit).collect()).expect("shape")
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_counter_replay() {
        let mut a = RngStream::at(7, 123);
        let mut b = RngStream::new(7);
        for _ in 0..123 {
            b.next_u64();
        }
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 173);
    }

    #[test]
    fn gaussian_sigma_zero_is_zero() {
        let t: Tensor<f64> = RngStream::new(1).gaussian([1, 1, 4, 4], 0.0);
        assert!(t.data().iter().all(|&x| x == 0.0 && x.is_sign_positive()));
    }

    #[test]
    fn gaussian_deterministic() {
        let a: Tensor<f64> = RngStream::at(5, 9).gaussian([2, 3, 4, 5], 1.5);
        let b: Tensor<f64> = RngStream::at(5, 9).gaussian([2, 3, 4, 5], 1.5);
        assert_eq!(a, b);
    }

    #[test]
    fn million_draws_moments() {
        let n = 1_000_000;
        let t: Tensor<f64> = RngStream::new(2024).gaussian([1, 1, 1000, 1000], 1.0);
        let mean = t.mean();
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn below_in_range() {
        let mut s = RngStream::new(3);
        for _ in 0..1000 {
            assert!(s.below(7) < 7);
        }
        assert_eq!(s.int_inclusive(4, 4), 4);
    }

    #[test]
    fn fork_is_independent_of_position() {
        let mut s = RngStream::new(11);
        let f1 = s.fork(3);
        s.next_u64();
        let f2 = s.fork(3);
        assert_eq!(f1, f2);
        assert_ne!(s.fork(3), s.fork(4));
    }
}
