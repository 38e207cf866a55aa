//! Positive solution of `x ⊙ (Q x + h) = β`.
//!
//! For symmetric positive definite `Q` this is the stationary point of the
//! strictly convex `-Σ β log x + ½ xᵀQx + hᵀx`. Damped Newton with a
//! fraction-to-boundary rule keeps iterates positive; cyclic coordinate
//! descent is the fallback when the line search stalls.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    /// Stop when `max_i |x_i (Qx+h)_i - β_i| <= tol * max(1, max β)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub used_fallback: bool,
}

/// `max_i |x_i (Qx + h)_i - β_i|`.
pub fn foc_residual(q: &DMatrix<f64>, h: &[f64], beta: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut r: f64 = 0.0;
    for i in 0..d {
        let mut qx = h[i];
        for j in 0..d {
            qx += q[(i, j)] * x[j];
        }
        r = r.max((x[i] * qx - beta[i]).abs());
    }
    r
}

fn is_symmetric(q: &DMatrix<f64>) -> bool {
    let d = q.nrows();
    let scale = q.amax().max(1e-300);
    (0..d).all(|i| (0..i).all(|j| (q[(i, j)] - q[(j, i)]).abs() <= 1e-12 * scale))
}

fn objective(q: &DMatrix<f64>, h: &[f64], beta: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut f = 0.0;
    for i in 0..d {
        let mut qx = 0.0;
        for j in 0..d {
            qx += q[(i, j)] * x[j];
        }
        f += -beta[i] * x[i].ln() + 0.5 * x[i] * qx + h[i] * x[i];
    }
    f
}

fn gradient(q: &DMatrix<f64>, h: &[f64], beta: &[f64], x: &[f64]) -> DVector<f64> {
    let d = x.len();
    DVector::from_fn(d, |i, _| {
        let mut g = h[i] - beta[i] / x[i];
        for j in 0..d {
            g += q[(i, j)] * x[j];
        }
        g
    })
}

/// Positive root of `a x^2 + b x - c = 0` with `a >= 0`, `c > 0`.
fn positive_root(a: f64, b: f64, c: f64) -> f64 {
    if a <= 0.0 {
        return c / b;
    }
    let disc = (b * b + 4.0 * a * c).sqrt();
    // stable form avoiding cancellation for b > 0
    if b >= 0.0 {
        2.0 * c / (b + disc)
    } else {
        (disc - b) / (2.0 * a)
    }
}

pub fn solve_barrier(
    q: &DMatrix<f64>,
    h: &[f64],
    beta: &[f64],
    start: Option<&[f64]>,
    opts: BarrierOptions,
) -> Result<BarrierSolution> {
    let d = beta.len();
    if q.nrows() != d || q.ncols() != d || h.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "barrier problem: Q is {}x{}, h has {}, beta has {d}",
            q.nrows(),
            q.ncols(),
            h.len()
        )));
    }
    if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::InvalidArgument("budget entries must be positive".into()));
    }
    if (0..d).any(|i| !(q[(i, i)] > 0.0)) {
        return Err(Error::DegenerateMarket("non-positive diagonal in local covariance".into()));
    }
    let bmax = beta.iter().cloned().fold(0.0, f64::max);
    let tol = opts.tol * bmax.max(1.0);

    if d == 1 {
        let x = positive_root(q[(0, 0)], h[0], beta[0]);
        if !(x.is_finite() && x > 0.0) {
            return Err(Error::DegenerateMarket("scalar budget equation has no positive root".into()));
        }
        let residual = foc_residual(q, h, beta, &[x]);
        return Ok(BarrierSolution { x: vec![x], iterations: 1, residual, used_fallback: false });
    }

    let symmetric = is_symmetric(q);
    let mut x: Vec<f64> = match start {
        Some(s) if s.len() == d && s.iter().all(|v| *v > 0.0 && v.is_finite()) => s.to_vec(),
        _ => (0..d).map(|i| (beta[i] / q[(i, i)]).sqrt()).collect(),
    };
    let merit = |x: &[f64]| -> f64 {
        if symmetric {
            objective(q, h, beta, x)
        } else {
            0.5 * gradient(q, h, beta, x).norm_squared()
        }
    };

    let mut residual = foc_residual(q, h, beta, &x);
    let mut it = 0;
    let mut stalled = false;
    while residual > tol && it < opts.max_iter {
        it += 1;
        let g = gradient(q, h, beta, &x);
        let mut jac = q.clone();
        for i in 0..d {
            jac[(i, i)] += beta[i] / (x[i] * x[i]);
        }
        let p = match jac.clone().lu().solve(&(-&g)) {
            Some(p) => p,
            None => {
                stalled = true;
                break;
            }
        };
        let slope = if symmetric { g.dot(&p) } else { -g.norm_squared() };
        if !(slope < 0.0) {
            stalled = true;
            break;
        }
        let mut alpha: f64 = 1.0;
        for i in 0..d {
            if p[i] < 0.0 {
                alpha = alpha.min(-0.99 * x[i] / p[i]);
            }
        }
        let f0 = merit(&x);
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..d).map(|i| x[i] + alpha * p[i]).collect();
            if trial.iter().all(|v| *v > 0.0) && merit(&trial) <= f0 + 1e-4 * alpha * slope {
                x = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Armijo can fail from round-off once the merit is flat; take the
            // step anyway if it shrinks the residual.
            let trial: Vec<f64> = (0..d).map(|i| x[i] + alpha * p[i]).collect();
            if trial.iter().all(|v| *v > 0.0) && foc_residual(q, h, beta, &trial) < residual {
                x = trial;
            } else {
                stalled = true;
                break;
            }
        }
        residual = foc_residual(q, h, beta, &x);
    }

    let mut used_fallback = false;
    if residual > tol && symmetric && (stalled || it >= opts.max_iter) {
        used_fallback = true;
        let (xc, sweeps, r) = coordinate_descent(q, h, beta, &x, tol, opts.max_iter);
        x = xc;
        residual = r;
        it += sweeps;
    }

    if residual > tol || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Convergence { iterations: it, residual });
    }
    Ok(BarrierSolution { x, iterations: it, residual, used_fallback })
}

/// Cyclic exact coordinate minimisation; each update solves a scalar quadratic.
/// Returns the iterate, sweep count and final residual.
pub fn coordinate_descent(
    q: &DMatrix<f64>,
    h: &[f64],
    beta: &[f64],
    start: &[f64],
    tol: f64,
    max_sweeps: usize,
) -> (Vec<f64>, usize, f64) {
    let d = beta.len();
    let mut x = start.to_vec();
    let mut residual = foc_residual(q, h, beta, &x);
    let mut sweeps = 0;
    while residual > tol && sweeps < max_sweeps {
        sweeps += 1;
        for i in 0..d {
            let mut b = h[i];
            for j in 0..d {
                if j != i {
                    b += q[(i, j)] * x[j];
                }
            }
            x[i] = positive_root(q[(i, i)], b, beta[i]);
        }
        residual = foc_residual(q, h, beta, &x);
    }
    (x, sweeps, residual)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_closed_form() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0, 0.5]));
        let beta = [1.0, 2.0, 0.5];
        let s = solve_barrier(&q, &[0.0; 3], &beta, None, Default::default()).unwrap();
        for i in 0..3 {
            assert!((s.x[i] - (beta[i] / q[(i, i)]).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_with_linear_term() {
        let q = DMatrix::from_element(1, 1, 3.0);
        let s = solve_barrier(&q, &[-2.0], &[1.5], None, Default::default()).unwrap();
        let x = s.x[0];
        assert!((x * (3.0 * x - 2.0) - 1.5).abs() < 1e-13);
        let s = solve_barrier(&q, &[5.0], &[1e-3], None, Default::default()).unwrap();
        let x = s.x[0];
        assert!((x * (3.0 * x + 5.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn nonsymmetric_system() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, -0.1, 1.0]);
        let beta = [0.4, 0.7];
        let s = solve_barrier(&q, &[0.1, -0.2], &beta, None, Default::default()).unwrap();
        assert!(s.residual < 1e-10);
    }

    #[test]
    fn coordinate_descent_agrees_with_newton() {
        let q = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let beta = [0.3, 0.2, 0.5];
        let newton = solve_barrier(&q, &[0.0; 3], &beta, None, Default::default()).unwrap();
        assert!(!newton.used_fallback);
        let (x, _, r) = coordinate_descent(&q, &[0.0; 3], &beta, &[5.0, 5.0, 5.0], 1e-13, 5000);
        assert!(r <= 1e-13);
        for i in 0..3 {
            assert!((x[i] - newton.x[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_cap_reports_residual() {
        let q = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        match solve_barrier(&q, &[0.0; 2], &[0.3, 0.2], None, BarrierOptions { tol: 1e-12, max_iter: 0 }) {
            Err(Error::Convergence { iterations: 0, residual }) => assert!(residual > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_diagonal_rejected() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            solve_barrier(&q, &[0.0; 2], &[1.0, 1.0], None, Default::default()),
            Err(Error::DegenerateMarket(_))
        ));
    }
}
