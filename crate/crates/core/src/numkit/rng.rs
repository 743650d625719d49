//! Reproducible pseudo-random numbers.
//!
//! The generator is xoshiro256** (Blackman & Vigna), with its 256-bit state
//! filled from the 64-bit seed by four successive SplitMix64 outputs. Both
//! algorithms are a few lines of integer arithmetic, so a seed reproduces
//! the same stream in any language that implements them:
//!
//! * `next_f64` takes the top 53 bits of `next_u64` and scales by 2⁻⁵³,
//!   giving a value in `[0, 1)`.
//! * `below(n)` uses rejection sampling on `next_u64` so it is unbiased.
//! * `standard_normal` uses the Box–Muller transform on two `next_f64`
//!   draws, `sqrt(-2 ln(1-u1)) · cos(2π u2)`; the sine branch is discarded
//!   so every normal consumes exactly two uniforms.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Restarts the stream from the original seed.
    pub fn reseed(&mut self) {
        *self = Rng::new(self.seed);
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `count` distinct indices from `0..n`, in increasing order.
    pub fn distinct_sorted(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot draw {count} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..count].to_vec();
        picked.sort_unstable();
        picked
    }
}

/// I.i.d. samples from `U[lo, hi)`.
pub fn rng_uniform(rng: &mut Rng, lo: f64, hi: f64, shape: (usize, usize)) -> Result<Matrix> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "uniform range [{lo}, {hi}) is empty or non-finite"
        )));
    }
    let data = (0..shape.0 * shape.1).map(|_| rng.uniform(lo, hi)).collect();
    Matrix::from_vec(shape.0, shape.1, data)
}

/// I.i.d. samples from `N(mean, var)`.
pub fn rng_gaussian(rng: &mut Rng, mean: f64, var: f64, shape: (usize, usize)) -> Result<Matrix> {
    if !(var >= 0.0) || !var.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian variance {var} must be finite and non-negative"
        )));
    }
    let sd = var.sqrt();
    let data = (0..shape.0 * shape.1)
        .map(|_| mean + sd * rng.standard_normal())
        .collect();
    Matrix::from_vec(shape.0, shape.1, data)
}
