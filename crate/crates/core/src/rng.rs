//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream_id)` and advanced by a word counter,
//! so its full state is three integers. The keystream comes from ChaCha8, which
//! is portable across platforms and supports independent 64-bit stream ids.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Well-known stream ids used by the engine.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const DATA: u64 = 4;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    /// Reconstructs a stream positioned at `counter` 32-bit words.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        inner.set_word_pos(counter as u128);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// A sibling stream with the same seed and a different id.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, `n > 0`. Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// One Box–Muller pair.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    /// `n` standard normals; both halves of each Box–Muller pair are used.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.normal_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(n);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_is_bit_identical() {
        let a = RngStream::new(7, 3).normal_vec(1000);
        let b = RngStream::new(7, 3).normal_vec(1000);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn counter_restores_position() {
        let mut a = RngStream::new(11, 1);
        let _ = a.normal_vec(37);
        let mut b = RngStream::at(11, 1, a.counter());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let v = RngStream::new(1, 0).normal_vec(1_000_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let n = 100_000;
        let a = RngStream::new(5, 10).normal_vec(n);
        let b = RngStream::new(5, 11).normal_vec(n);
        let (ma, mb) = (a.iter().sum::<f64>() / n as f64, b.iter().sum::<f64>() / n as f64);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = RngStream::new(0, 0);
        for _ in 0..1000 {
            assert!(r.below(7) < 7);
        }
    }
}
