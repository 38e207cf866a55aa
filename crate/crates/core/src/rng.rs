//! Counter-based Gaussian streams.
//!
//! Every path owns an independent ChaCha8 stream selected by `(seed, path)`,
//! so any path can be regenerated alone and results never depend on how
//! paths are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Standard normal draws for one path.
#[derive(Debug, Clone)]
pub struct PathRng {
    inner: ChaCha8Rng,
}

impl PathRng {
    pub fn new(seed: u64, path_index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(path_index);
        Self { inner }
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fills `out` with i.i.d. N(0, dt) draws.
    pub fn fill_increments(&mut self, dt: f64, out: &mut [f64]) {
        let sd = dt.sqrt();
        for x in out.iter_mut() {
            *x = sd * self.standard_normal();
        }
    }
}

/// Brownian increments for one path, laid out step-major (`n_steps x n_drivers`).
pub fn gaussian_increments(
    seed: u64,
    path_index: u64,
    n_steps: usize,
    n_drivers: usize,
    dt: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n_steps * n_drivers];
    PathRng::new(seed, path_index).fill_increments(dt, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_and_stderr;

    #[test]
    fn same_key_same_table() {
        let a = gaussian_increments(7, 3, 50, 2, 0.01);
        let b = gaussian_increments(7, 3, 50, 2, 0.01);
        assert_eq!(a, b);
    }

    #[test]
    fn paths_are_distinct() {
        let a = gaussian_increments(7, 3, 50, 2, 0.01);
        let b = gaussian_increments(7, 4, 50, 2, 0.01);
        let c = gaussian_increments(8, 3, 50, 2, 0.01);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_match_dt() {
        let dt = 0.01;
        let mut draws = Vec::with_capacity(1_000_000);
        for p in 0..1000u64 {
            draws.extend(gaussian_increments(11, p, 1000, 1, dt));
        }
        let m = mean_and_stderr(&draws).unwrap();
        assert!(m.mean.abs() <= 3.0 * m.stderr, "mean {m:?}");
        // variance of x^2 for N(0, dt) is 2 dt^2
        let sq: Vec<f64> = draws.iter().map(|x| x * x).collect();
        let v = mean_and_stderr(&sq).unwrap();
        assert!((v.mean - dt).abs() <= 3.0 * v.stderr, "var {v:?}");
    }
}
