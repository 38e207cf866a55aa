use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// `|self - other| / sqrt(se1^2 + se2^2)`; infinite when both errors vanish
    /// and the means differ.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        let diff = (self.mean - other.mean).abs();
        let se = combined_stderr(self.stderr, other.stderr);
        if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn scaled(&self, a: f64) -> Estimate {
        Estimate { mean: a * self.mean, stderr: a.abs() * self.stderr, n: self.n }
    }
}

pub fn combined_stderr(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Sample mean and standard error (sample std with `n - 1`, divided by `sqrt(n)`).
pub fn mean_and_stderr(samples: &[f64]) -> Result<Estimate> {
    let mut m = Moments::default();
    for &x in samples {
        m.push(x);
    }
    m.mean_estimate()
}

/// Unbiased sample variance with a delta-method standard error.
pub fn variance_estimate(samples: &[f64]) -> Result<Estimate> {
    let mut m = Moments::default();
    for &x in samples {
        m.push(x);
    }
    m.variance_estimate()
}

/// Streaming central moments up to order four (Welford / Chan updates).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let na = self.n as f64;
        let nb = o.n as f64;
        let n = na + nb;
        let d = o.mean - self.mean;
        let d2 = d * d;
        let d3 = d2 * d;
        let d4 = d2 * d2;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + o.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        self.mean += d * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.n += o.n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn sample_variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }

    /// Population (divide-by-n) variance.
    pub fn population_variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    pub fn mean_estimate(&self) -> Result<Estimate> {
        if self.n < 2 {
            return Err(invalid(format!("need at least 2 samples, got {}", self.n)));
        }
        let n = self.n as f64;
        Ok(Estimate { mean: self.mean, stderr: (self.sample_variance() / n).sqrt(), n: self.n })
    }

    pub fn variance_estimate(&self) -> Result<Estimate> {
        if self.n < 2 {
            return Err(invalid(format!("need at least 2 samples, got {}", self.n)));
        }
        let n = self.n as f64;
        let m2 = self.m2 / n;
        let m4 = self.m4 / n;
        let se = ((m4 - m2 * m2).max(0.0) / n).sqrt();
        Ok(Estimate { mean: self.sample_variance(), stderr: se, n: self.n })
    }
}

/// Streaming mean vector and co-moment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CoMoments {
    n: usize,
    mean: Vec<f64>,
    // row-major dim x dim sum of centred products
    c: Vec<f64>,
}

impl CoMoments {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], c: vec![0.0; dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        self.n += 1;
        let n = self.n as f64;
        let mut delta = vec![0.0; d];
        for i in 0..d {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / n;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.c[i * d + j] += after * delta[j];
            }
        }
    }

    pub fn merge(&mut self, o: &CoMoments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = o.clone();
            return;
        }
        let d = self.dim();
        let na = self.n as f64;
        let nb = o.n as f64;
        let n = na + nb;
        let delta: Vec<f64> = (0..d).map(|i| o.mean[i] - self.mean[i]).collect();
        for i in 0..d {
            for j in 0..d {
                self.c[i * d + j] += o.c[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for i in 0..d {
            self.mean[i] += delta[i] * nb / n;
        }
        self.n += o.n;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample covariance entry.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.c[i * self.dim() + j] / (self.n as f64 - 1.0)
    }

    /// Unbiased sample variance of the linear functional `w . x`.
    pub fn quadratic_form(&self, w: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += w[i] * self.covariance(i, j) * w[j];
            }
        }
        s
    }

    /// Estimate of the mean of `w . x`.
    pub fn linear_estimate(&self, w: &[f64]) -> Result<Estimate> {
        if self.n < 2 {
            return Err(invalid(format!("need at least 2 samples, got {}", self.n)));
        }
        let mean = w.iter().zip(&self.mean).map(|(a, b)| a * b).sum();
        let var = self.quadratic_form(w).max(0.0);
        Ok(Estimate { mean, stderr: (var / self.n as f64).sqrt(), n: self.n })
    }
}

/// Sample covariance of two equally long series with a delta-method stderr.
pub fn covariance_estimate(x: &[f64], y: &[f64]) -> Result<Estimate> {
    if x.len() != y.len() {
        return Err(invalid("covariance inputs differ in length"));
    }
    let n = x.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 samples, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut m = Moments::default();
    for (a, b) in x.iter().zip(y) {
        m.push((a - mx) * (b - my));
    }
    let nf = n as f64;
    let cov = m.mean() * nf / (nf - 1.0);
    let se = (m.population_variance() / nf).sqrt();
    Ok(Estimate { mean: cov, stderr: se, n })
}

/// Equal-probability quantile edges: `n_bins - 1` ascending cut points.
pub fn quantile_edges(values: &[f64], n_bins: usize) -> Vec<f64> {
    if n_bins <= 1 || values.is_empty() {
        return Vec::new();
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    (1..n_bins)
        .map(|b| {
            let idx = (b * n) / n_bins;
            v[idx.min(n - 1)]
        })
        .collect()
}

/// Bin index of `x` given ascending edges: number of edges strictly below `x`.
#[inline]
pub fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e < x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_sequence() {
        let e = mean_and_stderr(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.n, 4);
    }

    #[test]
    fn two_points() {
        let e = mean_and_stderr(&[0.0, 2.0]).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_relative_eq!(e.stderr, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_and_single() {
        assert!(mean_and_stderr(&[]).is_err());
        assert!(mean_and_stderr(&[3.0]).is_err());
    }

    #[test]
    fn merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64).sin() * 3.0 + 1.0).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..313].iter().for_each(|&x| a.push(x));
        xs[313..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_relative_eq!(a.mean(), all.mean(), epsilon = 1e-12);
        assert_relative_eq!(a.m2, all.m2, max_relative = 1e-12);
        assert_relative_eq!(a.m3, all.m3, max_relative = 1e-9, epsilon = 1e-9);
        assert_relative_eq!(a.m4, all.m4, max_relative = 1e-12);
    }

    #[test]
    fn fourth_moment_matches_direct() {
        let xs = [1.0, 4.0, -2.0, 0.5, 7.0, 3.0];
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        let mean = xs.iter().sum::<f64>() / 6.0;
        let m4: f64 = xs.iter().map(|x| (x - mean).powi(4)).sum();
        assert_relative_eq!(m.m4, m4, max_relative = 1e-12);
    }

    #[test]
    fn comoments_match_direct() {
        let rows: Vec<[f64; 2]> = (0..50).map(|i| [i as f64 * 0.3, ((i * i) % 17) as f64]).collect();
        let mut c = CoMoments::new(2);
        let mut c1 = CoMoments::new(2);
        let mut c2 = CoMoments::new(2);
        for (k, r) in rows.iter().enumerate() {
            c.push(r);
            if k < 20 { c1.push(r) } else { c2.push(r) }
        }
        c1.merge(&c2);
        let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let cov = covariance_estimate(&x, &y).unwrap();
        assert_relative_eq!(c.covariance(0, 1), cov.mean, max_relative = 1e-12);
        assert_relative_eq!(c1.covariance(0, 1), cov.mean, max_relative = 1e-12);
        assert_relative_eq!(c1.covariance(1, 1), c.covariance(1, 1), max_relative = 1e-12);
    }

    #[test]
    fn quantile_bins_balanced() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let e = quantile_edges(&v, 4);
        assert_eq!(e, vec![250.0, 500.0, 750.0]);
        let mut counts = [0usize; 4];
        for &x in &v {
            counts[bin_of(&e, x)] += 1;
        }
        assert_eq!(counts, [251, 250, 250, 249]);
    }
}
