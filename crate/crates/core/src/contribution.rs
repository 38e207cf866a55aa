//! Investment values, terminal variance and the marginal risk contribution
//! process.
//!
//! For a policy `u` with gains `M = X - x0`, drift `μ` and local covariance
//! `Σ` of the asset values, the marginal contribution is
//!
//! `c_t = 2 μ_t M_t + Σ_t u_t - μ_t E[M_T]`
//!
//! so that `Var(X_T) = E ∫ uᵀc dt`. `E[M_T]` is estimated in a first pass and
//! shared by every path in the second.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ensemble::{par_fold_paths, par_map_paths, PathData, PathSource};
use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::market::MarketModel;
use crate::policy::{audit_predictability, cap_shares, Policy, PolicyRef, PredictableMask, StepContext, DEFAULT_U_MAX};
use crate::stats::{covariance_estimate, mean_and_stderr, CoMoments, Estimate, Moments};

pub const CONVENTION: &str = "Var(X_T) = E int u'c dt";

fn check_shape(policy: &dyn Policy, src: &dyn PathSource) -> Result<()> {
    if policy.n_assets() != src.n_assets() {
        return Err(invalid(format!(
            "policy '{}' has {} assets, ensemble has {}",
            policy.name(),
            policy.n_assets(),
            src.n_assets()
        )));
    }
    Ok(())
}

/// Per-step quantities handed to a visitor while walking one path.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    /// Gains `M_k = X_k - x0` at the left node.
    pub gain: f64,
    pub u: &'a [f64],
    /// Marginal contribution; empty when no mean was supplied.
    pub c: &'a [f64],
    pub drift: &'a [f64],
    pub cov: &'a [f64],
}

/// Walks one path applying the left-point rule `X_{k+1} = X_k + u_kᵀ(S_{k+1} - S_k)`.
pub(crate) struct Walker<'a> {
    pub policy: &'a dyn Policy,
    pub model: Option<&'a dyn MarketModel>,
    pub grid: TimeGrid,
    pub x0: f64,
    pub u_max: f64,
    /// Shared `E[M_T]`; `None` skips the contribution.
    pub m_bar: Option<f64>,
}

pub(crate) struct WalkOutcome {
    pub terminal: f64,
    pub cap_hits: usize,
}

impl Walker<'_> {
    pub fn walk(&self, p: usize, path: &PathData, mut visit: impl FnMut(&StepView)) -> WalkOutcome {
        let d = path.n_assets;
        let mut u = vec![0.0; d];
        let mut mu = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        let mut c = vec![0.0; if self.m_bar.is_some() { d } else { 0 }];
        let mut x = self.x0;
        let mut hits = 0;
        for k in 0..self.grid.n_steps() {
            let t = self.grid.t(k);
            let ctx = StepContext::new(k, t, p, x, self.x0, path);
            self.policy.shares(&ctx, &mut u);
            if cap_shares(&mut u, self.u_max) {
                hits += 1;
            }
            let s = path.value(k);
            let gain = x - self.x0;
            if let Some(model) = self.model {
                let aux = path.aux(k);
                model.drift(t, s, aux, &mut mu);
                model.local_covariance(t, s, aux, &mut cov);
                if let Some(mb) = self.m_bar {
                    for i in 0..d {
                        let mut sig_u = 0.0;
                        for j in 0..d {
                            sig_u += cov[i * d + j] * u[j];
                        }
                        c[i] = 2.0 * mu[i] * gain + sig_u - mu[i] * mb;
                    }
                }
            }
            visit(&StepView { step: k, t, gain, u: &u, c: &c, drift: &mu, cov: &cov });
            let s1 = path.value(k + 1);
            for i in 0..d {
                x += u[i] * (s1[i] - s[i]);
            }
        }
        WalkOutcome { terminal: x, cap_hits: hits }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvestmentResult {
    /// `X_T` per path.
    pub terminal: Vec<f64>,
    pub terminal_mean: Estimate,
    pub terminal_variance: Estimate,
    /// Steps at which the share cap was applied, summed over paths.
    pub cap_hits: usize,
}

pub fn investment_value(policy: &dyn Policy, src: &dyn PathSource, x0: f64) -> Result<InvestmentResult> {
    check_shape(policy, src)?;
    let w = Walker { policy, model: None, grid: src.grid(), x0, u_max: DEFAULT_U_MAX, m_bar: None };
    let rows = par_map_paths(src, |p, path| {
        let o = w.walk(p, path, |_| {});
        (o.terminal, o.cap_hits)
    });
    let terminal: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let cap_hits = rows.iter().map(|r| r.1).sum();
    let mut m = Moments::default();
    terminal.iter().for_each(|&x| m.push(x));
    Ok(InvestmentResult { terminal_mean: m.mean_estimate()?, terminal_variance: m.variance_estimate()?, terminal, cap_hits })
}

/// Wealth per (path, node), path-major.
pub fn wealth_paths(policy: &dyn Policy, src: &dyn PathSource, x0: f64) -> Result<Vec<f64>> {
    check_shape(policy, src)?;
    let w = Walker { policy, model: None, grid: src.grid(), x0, u_max: DEFAULT_U_MAX, m_bar: None };
    let rows = par_map_paths(src, |p, path| {
        let mut xs = Vec::with_capacity(path.n_steps + 1);
        let o = w.walk(p, path, |v| xs.push(x0 + v.gain));
        xs.push(o.terminal);
        xs
    });
    Ok(rows.concat())
}

pub fn terminal_variance(policy: &dyn Policy, src: &dyn PathSource, x0: f64) -> Result<Estimate> {
    Ok(investment_value(policy, src, x0)?.terminal_variance)
}

/// Lazily evaluated `c` and `k = u ⊙ c` for one policy on one ensemble.
#[derive(Clone)]
pub struct ContributionProcess<'a> {
    policy: PolicyRef,
    src: &'a dyn PathSource,
    model: Arc<dyn MarketModel>,
    x0: f64,
    m_bar: Estimate,
}

impl<'a> ContributionProcess<'a> {
    /// Two-pass construction: estimates `E[M_T]` first.
    pub fn new(policy: PolicyRef, src: &'a dyn PathSource, x0: f64) -> Result<Self> {
        check_shape(policy.as_ref(), src)?;
        let model = src.require_model()?;
        let inv = investment_value(policy.as_ref(), src, x0)?;
        let m_bar = Estimate { mean: inv.terminal_mean.mean - x0, ..inv.terminal_mean };
        Ok(Self { policy, src, model, x0, m_bar })
    }

    /// Uses a caller-supplied `E[M_T]` (e.g. to compare policies on a shared scalar).
    pub fn with_mean(policy: PolicyRef, src: &'a dyn PathSource, x0: f64, m_bar: f64) -> Result<Self> {
        check_shape(policy.as_ref(), src)?;
        let model = src.require_model()?;
        Ok(Self { policy, src, model, x0, m_bar: Estimate { mean: m_bar, stderr: 0.0, n: src.n_paths() } })
    }

    pub fn policy(&self) -> &PolicyRef {
        &self.policy
    }

    pub fn source(&self) -> &'a dyn PathSource {
        self.src
    }

    pub fn model(&self) -> &Arc<dyn MarketModel> {
        &self.model
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    /// Estimated `E[M_T]` shared by all paths.
    pub fn mean_gain(&self) -> Estimate {
        self.m_bar
    }

    pub fn convention(&self) -> &'static str {
        CONVENTION
    }

    pub(crate) fn walker(&self) -> Walker<'_> {
        Walker {
            policy: self.policy.as_ref(),
            model: Some(self.model.as_ref()),
            grid: self.src.grid(),
            x0: self.x0,
            u_max: DEFAULT_U_MAX,
            m_bar: Some(self.m_bar.mean),
        }
    }

    /// `(u, c)` for one path, step-major.
    pub fn path(&self, p: usize) -> PathContribution {
        let mut buf = self.src.new_buffer();
        self.src.load_path(p, &mut buf);
        self.path_from(p, &buf)
    }

    pub(crate) fn path_from(&self, p: usize, buf: &PathData) -> PathContribution {
        let d = buf.n_assets;
        let n = buf.n_steps;
        let mut u = Vec::with_capacity(n * d);
        let mut c = Vec::with_capacity(n * d);
        let mut gain = Vec::with_capacity(n + 1);
        let o = self.walker().walk(p, buf, |v| {
            u.extend_from_slice(v.u);
            c.extend_from_slice(v.c);
            gain.push(v.gain);
        });
        gain.push(o.terminal - self.x0);
        PathContribution { n_assets: d, u, c, gain }
    }

    /// All paths in memory.
    pub fn materialize(&self) -> ContributionTable {
        let rows = par_map_paths(self.src, |p, buf| self.path_from(p, buf));
        let grid = self.src.grid();
        let d = self.src.n_assets();
        let mut u = Vec::new();
        let mut c = Vec::new();
        for r in rows {
            u.extend(r.u);
            c.extend(r.c);
        }
        ContributionTable { grid, n_paths: self.src.n_paths(), n_assets: d, u, c }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathContribution {
    pub n_assets: usize,
    pub u: Vec<f64>,
    pub c: Vec<f64>,
    /// `M` per node.
    pub gain: Vec<f64>,
}

impl PathContribution {
    pub fn k(&self) -> Vec<f64> {
        self.u.iter().zip(&self.c).map(|(a, b)| a * b).collect()
    }
}

/// Materialised `(u, c)` per (path, step, asset).
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTable {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n_assets: usize,
    pub u: Vec<f64>,
    pub c: Vec<f64>,
}

impl ContributionTable {
    #[inline]
    pub fn index(&self, p: usize, k: usize, i: usize) -> usize {
        (p * self.grid.n_steps() + k) * self.n_assets + i
    }

    pub fn k(&self) -> Vec<f64> {
        self.u.iter().zip(&self.c).map(|(a, b)| a * b).collect()
    }
}

/// Builds the contribution process of `policy` on a model-carrying ensemble.
pub fn explicit_marginal_contribution<'a>(
    policy: PolicyRef,
    src: &'a dyn PathSource,
    x0: f64,
) -> Result<ContributionProcess<'a>> {
    ContributionProcess::new(policy, src, x0)
}

/// `E Σ_k u_kᵀ c_k dt`.
pub fn aggregate_risk(cp: &ContributionProcess) -> Result<Estimate> {
    pairing(cp, cp.policy.as_ref())
}

/// `E ∫ vᵀ c^u dt` for a direction `v`.
pub fn pairing(cp: &ContributionProcess, v: &dyn Policy) -> Result<Estimate> {
    check_shape(v, cp.src)?;
    let dt = cp.src.grid().dt();
    let walker = cp.walker();
    let x0 = cp.x0;
    let per_path = par_map_paths(cp.src, |p, path| {
        let d = path.n_assets;
        let mut vv = vec![0.0; d];
        // v is evaluated on its own wealth process
        let mut xv = x0;
        let mut acc = 0.0;
        walker.walk(p, path, |s| {
            let ctx = StepContext::new(s.step, s.t, p, xv, x0, path);
            v.shares(&ctx, &mut vv);
            cap_shares(&mut vv, DEFAULT_U_MAX);
            let mut dot = 0.0;
            for i in 0..d {
                dot += vv[i] * s.c[i];
            }
            acc += dot * dt;
            let (s0, s1) = (path.value(s.step), path.value(s.step + 1));
            for i in 0..d {
                xv += vv[i] * (s1[i] - s0[i]);
            }
        });
        acc
    });
    mean_and_stderr(&per_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manner {
    Share,
    Money,
    Weight,
}

/// Risk contributions per (path, step, asset) computed in the requested manner.
///
/// Money and weight manners require a self-financing portfolio
/// (`X_t = u_tᵀS_t` on every node within `1e-8` relative) and positive prices.
pub fn risk_contribution_variants(cp: &ContributionProcess, manner: Manner) -> Result<Vec<f64>> {
    let src = cp.src;
    let grid = src.grid();
    let d = src.n_assets();
    let n = grid.n_steps();
    let x0 = cp.x0;
    let mb = cp.m_bar.mean;
    let rows: Vec<Result<Vec<f64>>> = par_map_paths(src, |p, path| {
        let pc = cp.path_from(p, path);
        if manner == Manner::Share {
            return Ok(pc.k());
        }
        let model = cp.model.as_ref();
        let mut mu = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        let mut out = vec![0.0; n * d];
        for k in 0..n {
            let s = path.value(k);
            let u = &pc.u[k * d..(k + 1) * d];
            let x = x0 + pc.gain[k];
            let held: f64 = u.iter().zip(s).map(|(a, b)| a * b).sum();
            if (held - x).abs() > 1e-8 * x.abs().max(1e-300) {
                return Err(Error::InconsistentPortfolio(format!(
                    "path {p} step {k}: X = {x} but u.S = {held}"
                )));
            }
            if s.iter().any(|v| *v <= 0.0) {
                return Err(Error::InconsistentPortfolio("non-positive price in money/weight manner".into()));
            }
            let t = grid.t(k);
            model.drift(t, s, path.aux(k), &mut mu);
            model.local_covariance(t, s, path.aux(k), &mut cov);
            let money: Vec<f64> = match manner {
                Manner::Money => u.iter().zip(s).map(|(a, b)| a * b).collect(),
                _ => {
                    let w: Vec<f64> = u.iter().zip(s).map(|(a, b)| a * b / x).collect();
                    w.iter().map(|wi| wi * x).collect()
                }
            };
            for i in 0..d {
                let b = mu[i] / s[i];
                let mut cm = 0.0;
                for j in 0..d {
                    cm += cov[i * d + j] / (s[i] * s[j]) * money[j];
                }
                let per_money = 2.0 * b * (x - x0) + cm - b * mb;
                out[k * d + i] = money[i] * per_money;
            }
        }
        Ok(out)
    });
    let mut all = Vec::with_capacity(src.n_paths() * n * d);
    for r in rows {
        all.extend(r?);
    }
    Ok(all)
}

/// `E ∫ 1_E ⊙ c dt` per asset. Masks with full-path access are audited first.
pub fn marginal_measure(cp: &ContributionProcess, mask: &PredictableMask) -> Result<Vec<Estimate>> {
    check_shape(mask, cp.src)?;
    if !mask.is_context_rule() {
        audit_predictability(mask, cp.src, cp.x0, 64)?;
    }
    let dt = cp.src.grid().dt();
    let walker = cp.walker();
    let d = cp.src.n_assets();
    let rows = par_map_paths(cp.src, |p, path| {
        let mut acc = vec![0.0; d];
        let mut ind = vec![0.0; d];
        walker.walk(p, path, |s| {
            let ctx = StepContext::new(s.step, s.t, p, f64::NAN, cp.x0, path);
            mask.shares(&ctx, &mut ind);
            for i in 0..d {
                acc[i] += ind[i] * s.c[i] * dt;
            }
        });
        acc
    });
    (0..d)
        .map(|i| mean_and_stderr(&rows.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect()
}

/// Largest `|u|` over all (path, step, asset).
pub fn sup_norm(policy: &dyn Policy, src: &dyn PathSource, x0: f64) -> Result<f64> {
    check_shape(policy, src)?;
    let w = Walker { policy, model: None, grid: src.grid(), x0, u_max: DEFAULT_U_MAX, m_bar: None };
    let m = par_map_paths(src, |p, path| {
        let mut m: f64 = 0.0;
        w.walk(p, path, |s| s.u.iter().for_each(|v| m = m.max(v.abs())));
        m
    });
    Ok(m.into_iter().fold(0.0, f64::max))
}

/// Central difference of the sample variance of `X_T` along `v`:
/// `[Var(X^{u+hv}) - Var(X^{u-hv})] / (2h)`. `h` defaults to `1e-4 ‖u‖_∞`.
pub fn gateaux_oracle(u: &PolicyRef, v: &PolicyRef, src: &dyn PathSource, x0: f64, h: Option<f64>) -> Result<f64> {
    let h = match h {
        Some(h) => h,
        None => 1e-4 * sup_norm(u.as_ref(), src, x0)?.max(1e-300),
    };
    if !(h > 0.0) {
        return Err(invalid("bump must be positive"));
    }
    let up = crate::policy::combine(1.0, u, h, v)?;
    let dn = crate::policy::combine(1.0, u, -h, v)?;
    let a = investment_value(up.as_ref(), src, x0)?.terminal_variance.mean;
    let b = investment_value(dn.as_ref(), src, x0)?.terminal_variance.mean;
    Ok((a - b) / (2.0 * h))
}

#[derive(Debug, Clone, Serialize)]
pub struct GateauxRow {
    pub slope: f64,
    /// `E ∫ vᵀ c^u dt`.
    pub pairing: Estimate,
    /// `|slope - 2 pairing| / |2 pairing|`.
    pub relative_error: f64,
}

/// Gâteaux slope versus contribution pairing for many constant `(u, v)` pairs
/// in a single pass over the paths, using per-path sufficient statistics
/// `A = S_T - S_0`, `∫Σ dt`, `∫μ (S - S_0)ᵀ dt` and `∫μ dt`.
pub fn gateaux_constant_batch(
    src: &dyn PathSource,
    pairs: &[(Vec<f64>, Vec<f64>)],
    h_rel: f64,
) -> Result<Vec<GateauxRow>> {
    let model = src.require_model()?;
    let d = src.n_assets();
    if pairs.iter().any(|(u, v)| u.len() != d || v.len() != d) {
        return Err(invalid("pair dimension does not match the ensemble"));
    }
    let grid = src.grid();
    let dt = grid.dt();
    let dim = 2 * d + 2 * d * d;
    let driftless = model.is_driftless();
    let stats = par_fold_paths(
        src,
        || CoMoments::new(dim),
        |acc, _, path| {
            let mut z = vec![0.0; dim];
            let mut mu = vec![0.0; d];
            let mut cov = vec![0.0; d * d];
            let s0 = path.value(0);
            for k in 0..grid.n_steps() {
                let t = grid.t(k);
                let s = path.value(k);
                model.local_covariance(t, s, path.aux(k), &mut cov);
                for e in 0..d * d {
                    z[d + d * d + e] += cov[e] * dt;
                }
                if !driftless {
                    model.drift(t, s, path.aux(k), &mut mu);
                    for i in 0..d {
                        for j in 0..d {
                            z[d + i * d + j] += mu[i] * (s[j] - s0[j]) * dt;
                        }
                        z[d + 2 * d * d + i] += mu[i] * dt;
                    }
                }
            }
            let st = path.value(grid.n_steps());
            for i in 0..d {
                z[i] = st[i] - s0[i];
            }
            acc.push(&z);
        },
        |a, b| a.merge(&b),
    );
    let a_bar: Vec<f64> = stats.mean()[..d].to_vec();
    let mut rows = Vec::with_capacity(pairs.len());
    for (u, v) in pairs {
        let h = h_rel * u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut w = vec![0.0; dim];
        let mut a_plus = vec![0.0; dim];
        let mut a_minus = vec![0.0; dim];
        for i in 0..d {
            a_plus[i] = u[i] + h * v[i];
            a_minus[i] = u[i] - h * v[i];
        }
        let slope = (stats.quadratic_form(&a_plus) - stats.quadratic_form(&a_minus)) / (2.0 * h);
        let ua: f64 = u.iter().zip(&a_bar).map(|(x, y)| x * y).sum();
        for i in 0..d {
            for j in 0..d {
                w[d + i * d + j] = 2.0 * v[i] * u[j];
                w[d + d * d + i * d + j] = v[i] * u[j];
            }
            w[d + 2 * d * d + i] = -v[i] * ua;
        }
        let pairing = stats.linear_estimate(&w)?;
        let relative_error = (slope - 2.0 * pairing.mean).abs() / (2.0 * pairing.mean).abs();
        rows.push(GateauxRow { slope, pairing, relative_error });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceReport {
    /// `E ∫ vᵀ c^u dt`.
    pub v_on_u: Estimate,
    /// `E ∫ uᵀ c^v dt`.
    pub u_on_v: Estimate,
    /// Sample covariance of `X^u_T` and `X^v_T`.
    pub direct: Estimate,
}

impl CovarianceReport {
    /// Largest pairwise z-score among the three estimates.
    pub fn max_z(&self) -> f64 {
        self.v_on_u
            .z_score(&self.u_on_v)
            .max(self.v_on_u.z_score(&self.direct))
            .max(self.u_on_v.z_score(&self.direct))
    }
}

/// `Cov(X^u_T, X^v_T)` through the contribution of `u` paired with `v`.
pub fn covariance_via_contribution(u: &PolicyRef, v: &PolicyRef, src: &dyn PathSource, x0: f64) -> Result<Estimate> {
    let cu = ContributionProcess::new(u.clone(), src, x0)?;
    pairing(&cu, v.as_ref())
}

pub fn covariance_report(u: &PolicyRef, v: &PolicyRef, src: &dyn PathSource, x0: f64) -> Result<CovarianceReport> {
    let v_on_u = covariance_via_contribution(u, v, src, x0)?;
    let u_on_v = covariance_via_contribution(v, u, src, x0)?;
    let xu = investment_value(u.as_ref(), src, x0)?.terminal;
    let xv = investment_value(v.as_ref(), src, x0)?.terminal;
    Ok(CovarianceReport { v_on_u, u_on_v, direct: covariance_estimate(&xu, &xv)? })
}

/// Direct sample covariance of terminal wealths.
pub fn direct_covariance(u: &dyn Policy, v: &dyn Policy, src: &dyn PathSource, x0: f64) -> Result<Estimate> {
    let xu = investment_value(u, src, x0)?.terminal;
    let xv = investment_value(v, src, x0)?.terminal;
    covariance_estimate(&xu, &xv)
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityReport {
    pub lhs: f64,
    pub bound: f64,
    pub constant: f64,
    pub sup_delta: f64,
}

impl ContinuityReport {
    pub fn holds(&self) -> bool {
        self.lhs <= self.bound
    }
}

/// `|E ∫ 1_Eᵀ c^{u-u'} dt|` against `K ‖u - u'‖_∞`, with
/// `K = E ∫ Σ_i (2|μ_i| TV_t + Σ_j |Σ_ij| + |μ_i| E[TV_T]) dt` and `TV_t` the
/// summed absolute price moves up to `t`.
pub fn contribution_continuity_check(
    u: &PolicyRef,
    u_perturbed: &PolicyRef,
    src: &dyn PathSource,
    mask: &PredictableMask,
    x0: f64,
) -> Result<ContinuityReport> {
    let delta = crate::policy::combine(1.0, u, -1.0, u_perturbed)?;
    let cp = ContributionProcess::new(delta.clone(), src, x0)?;
    let lhs: f64 = marginal_measure(&cp, mask)?.iter().map(|e| e.mean).sum::<f64>().abs();
    let sup_delta = sup_norm(delta.as_ref(), src, x0)?;
    let model = cp.model.clone();
    let grid = src.grid();
    let dt = grid.dt();
    let d = src.n_assets();
    // per path: (∫ Σ_i 2|μ_i| TV_t + Σ_ij|Σ_ij| dt, ∫ Σ_i |μ_i| dt, TV_T)
    let rows = par_map_paths(src, |_, path| {
        let mut mu = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        let mut tv = 0.0;
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..grid.n_steps() {
            let t = grid.t(k);
            let s = path.value(k);
            model.drift(t, s, path.aux(k), &mut mu);
            model.local_covariance(t, s, path.aux(k), &mut cov);
            let mu_abs: f64 = mu.iter().map(|m| m.abs()).sum();
            let cov_abs: f64 = cov.iter().map(|m| m.abs()).sum();
            a += (2.0 * mu_abs * tv + cov_abs) * dt;
            b += mu_abs * dt;
            let s1 = path.value(k + 1);
            tv += s.iter().zip(s1).map(|(x, y)| (y - x).abs()).sum::<f64>();
        }
        (a, b, tv)
    });
    let n = rows.len() as f64;
    let ea = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let eb = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let etv = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let constant = ea + eb * etv;
    Ok(ContinuityReport { lhs, bound: constant * sup_delta, constant, sup_delta })
}
