//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a [`Stream`] addressed by
//! `(seed, domain, index)`. A stream's `k`-th output is
//! `splitmix64_mix(key + (k + 1) * GOLDEN)` where `key` is derived by chaining the
//! same finalizer over the address. No state is shared between rows, so data
//! can be generated in any order (or in parallel) and remain bit-identical.
//!
//! Gaussian variates use the inverse normal CDF (Wichura's AS241, PPND16) of
//! a uniform in the open interval `(0, 1)`, one uniform per variate.

/// Weyl increment used by SplitMix64.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream domains. Keeping them distinct guarantees that, say, the mixer never
/// reuses the random numbers that generated a data row.
pub mod domain {
    pub const DATA_ROW: u64 = 0x01;
    pub const BALANCED_ROW: u64 = 0x02;
    pub const SINGLE_GROUP_ROW: u64 = 0x03;
    pub const MIX_ROW: u64 = 0x04;
    pub const RUN: u64 = 0x05;
    pub const SPLIT: u64 = 0x06;
    pub const SAMPLE: u64 = 0x07;
    pub const SGD: u64 = 0x08;
    pub const SUBSET: u64 = 0x09;
    pub const BENCHMARK: u64 = 0x0A;
}

/// SplitMix64 output finalizer (Stafford variant 13).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from `(seed, domain, index)`.
#[inline]
pub fn derive(seed: u64, domain: u64, index: u64) -> u64 {
    let k = mix64(seed.wrapping_add(GOLDEN));
    let k = mix64(k ^ domain.wrapping_mul(GOLDEN));
    mix64(k.wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

/// Sub-seed for child computations (per run, per grid cell, ...).
pub fn child_seed(seed: u64, domain: u64, index: u64) -> u64 {
    derive(seed, domain, index)
}

#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, domain: u64, index: u64) -> Self {
        Self {
            key: derive(seed, domain, index),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`; safe to feed to the inverse CDF.
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.next_open01())
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `0..n` by the multiply-high method. The bias is at
    /// most `n / 2^64`, far below anything a test can observe.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` (partial Fisher-Yates), in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct items from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Inverse of the standard normal CDF, Wichura (1988) algorithm AS241
/// (PPND16), accurate to about 1e-16 relative.
#[allow(clippy::excessive_precision)]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301227 * r + 33430.575583588128) * r
                + 67265.770927008700)
                * r
                + 45921.953931549871)
                * r
                + 13731.693765509461)
                * r
                + 1971.5909503065513)
                * r
                + 133.14166789178438)
                * r
                + 3.3871328727963665)
            / (((((((5226.4952788525455 * r + 28729.085735721943) * r
                + 39307.895800092710)
                * r
                + 21213.794301586595)
                * r
                + 5394.196021424751)
                * r
                + 687.1870074920579)
                * r
                + 42.313330701600911)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.745450142783414e-4 * r + 0.022723844989269184) * r
            + 0.2417807251774506)
            * r
            + 1.2704582524523684)
            * r
            + 3.6478483247632045)
            * r
            + 5.769497221460691)
            * r
            + 4.630337846156546)
            * r
            + 1.4234371107496835)
            / (((((((1.0507500716444169e-9 * r + 5.475938084995345e-4) * r
                + 0.015198666563616457)
                * r
                + 0.14810397642748008)
                * r
                + 0.6897673349851)
                * r
                + 1.6763848301838038)
                * r
                + 2.053191626637759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.0103343992922881e-7 * r + 2.7115555687434876e-5) * r
            + 0.0012426609473880784)
            * r
            + 0.026532189526576124)
            * r
            + 0.2965605718285049)
            * r
            + 1.7848265399172913)
            * r
            + 5.463784911164114)
            * r
            + 6.657904643501103)
            / (((((((2.0442631033899397e-15 * r + 1.421511758316446e-7) * r
                + 1.8463183175100548e-5)
                * r
                + 7.868691311456133e-4)
                * r
                + 0.014875361290850615)
                * r
                + 0.1369298809227358)
                * r
                + 0.599832206555888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
