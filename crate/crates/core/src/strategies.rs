//! Closed-form policies and contributions for the worked examples:
//! volatility-managed exposure, SABR budgets under restricted information and
//! continuous-time mean-variance.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::budgeting::{solve_budget_iterative, BudgetProblem, BudgetRef, InformationClass, LambdaOverT};
use crate::contribution::{investment_value, ContributionTable};
use crate::ensemble::{par_map_paths, PathSource};
use crate::error::{invalid, Error, Result};
use crate::market::{BondParams, BondStock, MarketModel, Sabr, SabrParams};
use crate::policy::{
    cap_shares, ConstantPolicy, Policy, PolicyKind, PolicyRef, StateBinning, StateVariable, StepContext,
    DEFAULT_U_MAX,
};
use crate::registry::{field, Registry};
use crate::stats::Estimate;

// ---------------------------------------------------------------------------
// volatility-managed

/// `u_i = ĉ / σ_i²`, with `σ_i` the model's relative volatility.
#[derive(Clone)]
pub struct VolManagedPolicy {
    pub c_hat: f64,
    pub u_max: f64,
    model: Arc<dyn MarketModel>,
}

impl fmt::Debug for VolManagedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VolManagedPolicy").field("c_hat", &self.c_hat).field("u_max", &self.u_max).finish()
    }
}

impl VolManagedPolicy {
    pub fn new(c_hat: f64, model: Arc<dyn MarketModel>) -> Result<Self> {
        if !(c_hat > 0.0 && c_hat.is_finite()) {
            return Err(invalid("c_hat must be positive"));
        }
        Ok(Self { c_hat, u_max: DEFAULT_U_MAX, model })
    }

    /// Uncapped value.
    pub fn raw(&self, ctx: &StepContext, out: &mut [f64]) {
        let h = ctx.history();
        self.model.volatility(ctx.t, h.current_value(), h.current_aux(), out);
        for v in out.iter_mut() {
            *v = if *v > 0.0 { self.c_hat / (*v * *v) } else { f64::INFINITY };
        }
    }

    /// Fraction of (path, step) cells where the cap binds.
    pub fn cap_hit_fraction(&self, src: &dyn PathSource) -> f64 {
        let grid = src.grid();
        let d = src.n_assets();
        let hits = par_map_paths(src, |p, path| {
            let mut out = vec![0.0; d];
            (0..grid.n_steps())
                .filter(|&k| {
                    self.raw(&StepContext::new(k, grid.t(k), p, f64::NAN, 0.0, path), &mut out);
                    out.iter().any(|v| v.abs() > self.u_max)
                })
                .count()
        });
        hits.iter().sum::<usize>() as f64 / (src.n_paths() * grid.n_steps()) as f64
    }
}

impl Policy for VolManagedPolicy {
    fn name(&self) -> String {
        "vol_managed".into()
    }
    fn n_assets(&self) -> usize {
        self.model.n_assets()
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        self.raw(ctx, out);
        cap_shares(out, self.u_max);
    }
}

pub fn vol_managed_policy(c_hat: f64, src: &dyn PathSource) -> Result<VolManagedPolicy> {
    VolManagedPolicy::new(c_hat, src.require_model()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct LongTermPoint {
    pub t: f64,
    /// Mean over paths of `(X_t - x0) / t`.
    pub average_return: f64,
    /// Mean over paths of `∫_0^t β^{1/2} θ ds / t`.
    pub average_signal: f64,
    /// Mean over paths of the absolute difference of the two.
    pub mean_abs_gap: f64,
}

/// Compares `(X_t - x0)/t` with the time-averaged signal `β^{1/2} θ`,
/// `θ_i = μ_i / √Σ_ii`, at `T/4`, `T/2` and `T` (first asset).
pub fn vol_managed_long_term(src: &dyn PathSource, c_hat: f64, x0: f64) -> Result<Vec<LongTermPoint>> {
    let model = src.require_model()?;
    let policy = VolManagedPolicy::new(c_hat, model.clone())?;
    let grid = src.grid();
    let n = grid.n_steps();
    if n < 4 {
        return Err(invalid("long-term check needs at least four steps"));
    }
    let checkpoints = [n / 4, n / 2, n];
    let d = src.n_assets();
    let dt = grid.dt();
    let rows = par_map_paths(src, |p, path| {
        let mut u = vec![0.0; d];
        let mut mu = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        let (mut x, mut sig) = (0.0, 0.0);
        let mut out = Vec::with_capacity(3);
        for k in 0..n {
            let t = grid.t(k);
            let s = path.value(k);
            policy.shares(&StepContext::new(k, t, p, x0 + x, x0, path), &mut u);
            model.drift(t, s, path.aux(k), &mut mu);
            model.local_covariance(t, s, path.aux(k), &mut cov);
            let sd = cov[0].max(0.0).sqrt();
            if sd > 0.0 {
                // β^{1/2} = ĉ S / σ_rel = ĉ S² / sd
                let amp = c_hat * s[0] * s[0] / sd;
                sig += amp * (mu[0] / sd) * dt;
            }
            let s1 = path.value(k + 1);
            for i in 0..d {
                x += u[i] * (s1[i] - s[i]);
            }
            if checkpoints.contains(&(k + 1)) {
                out.push((x, sig));
            }
        }
        out
    });
    let np = rows.len() as f64;
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let t = grid.t(k);
            let (mut a, mut b, mut g) = (0.0, 0.0, 0.0);
            for r in &rows {
                a += r[j].0 / t;
                b += r[j].1 / t;
                g += ((r[j].0 - r[j].1) / t).abs();
            }
            LongTermPoint { t, average_return: a / np, average_signal: b / np, mean_abs_gap: g / np }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// SABR

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SabrCase {
    Parity,
    HProjection,
    Deterministic,
    SinglePeriod,
}

impl SabrCase {
    pub const ALL: [SabrCase; 4] = [SabrCase::Parity, SabrCase::HProjection, SabrCase::Deterministic, SabrCase::SinglePeriod];

    pub fn name(&self) -> &'static str {
        match self {
            SabrCase::Parity => "parity",
            SabrCase::HProjection => "h_projection",
            SabrCase::Deterministic => "deterministic",
            SabrCase::SinglePeriod => "single_period",
        }
    }
}

/// Number of driver bins used for the `B₁`-measurable projection.
pub const H_PROJECTION_BINS: usize = 64;

fn sabr_model(src: &dyn PathSource) -> Result<Sabr> {
    let model = src.require_model()?;
    if model.name() != "sabr" {
        return Err(Error::UnsupportedModel(format!("expected a sabr ensemble, got '{}'", model.name())));
    }
    let params: SabrParams = serde_json::from_value(model.params_json()).map_err(|e| invalid(e.to_string()))?;
    Sabr::new(params)
}

/// `√(λ/T) / (σ_t F_t^β̂)`, zero once the forward is absorbed.
#[derive(Debug, Clone)]
pub struct SabrParityPolicy {
    sabr: Sabr,
    level: f64,
}

impl Policy for SabrParityPolicy {
    fn name(&self) -> String {
        "sabr_parity".into()
    }
    fn n_assets(&self) -> usize {
        1
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        let h = ctx.history();
        let f = h.current_value()[0];
        let v = h.current_aux()[0] * self.sabr.f_pow(f);
        out[0] = if f > 0.0 && v > 0.0 { self.level / v } else { 0.0 };
    }
}

/// Policy for one of the four information cases at total risk `λ`.
pub fn sabr_policy(case: SabrCase, lambda: f64, src: &dyn PathSource) -> Result<PolicyRef> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda must be positive"));
    }
    let sabr = sabr_model(src)?;
    let horizon = src.grid().horizon();
    let budget: BudgetRef = Arc::new(LambdaOverT::new(lambda, 1)?);
    match case {
        SabrCase::Parity => Ok(Arc::new(SabrParityPolicy { sabr, level: (lambda / horizon).sqrt() })),
        SabrCase::HProjection => {
            let class = InformationClass::Feedback(StateBinning { state: StateVariable::Driver(0), n_bins: H_PROJECTION_BINS });
            Ok(solve_budget_iterative(&BudgetProblem::new(src, budget, class, 0.0))?.policy)
        }
        SabrCase::Deterministic => {
            Ok(solve_budget_iterative(&BudgetProblem::new(src, budget, InformationClass::Deterministic, 0.0))?.policy)
        }
        SabrCase::SinglePeriod => {
            let unit = ConstantPolicy::new(vec![1.0]);
            let var = investment_value(&unit, src, 0.0)?.terminal_variance.mean;
            if !(var > 0.0) {
                return Err(Error::DegenerateMarket("forward has zero terminal variance".into()));
            }
            Ok(Arc::new(ConstantPolicy::new(vec![(lambda / var).sqrt()])))
        }
    }
}

/// `c_t = u_t σ_t² F_t^{2β̂}` per (path, step).
pub fn sabr_marginal(policy: &dyn Policy, src: &dyn PathSource) -> Result<ContributionTable> {
    let sabr = sabr_model(src)?;
    if policy.n_assets() != 1 {
        return Err(invalid("sabr policies are one-dimensional"));
    }
    let grid = src.grid();
    let n = grid.n_steps();
    let rows = par_map_paths(src, |p, path| {
        let mut u = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        let mut x = 0.0;
        let mut buf = [0.0];
        for k in 0..n {
            policy.shares(&StepContext::new(k, grid.t(k), p, x, 0.0, path), &mut buf);
            cap_shares(&mut buf, DEFAULT_U_MAX);
            let f = path.value(k)[0];
            let v = path.aux(k)[0] * sabr.f_pow(f);
            u.push(buf[0]);
            c.push(buf[0] * v * v);
            x += buf[0] * (path.value(k + 1)[0] - f);
        }
        (u, c)
    });
    let mut u = Vec::with_capacity(src.n_paths() * n);
    let mut c = Vec::with_capacity(src.n_paths() * n);
    for (a, b) in rows {
        u.extend(a);
        c.extend(b);
    }
    Ok(ContributionTable { grid, n_paths: src.n_paths(), n_assets: 1, u, c })
}

/// Population variance of `k = u c` over all (path, step) cells.
pub fn contribution_dispersion(table: &ContributionTable) -> f64 {
    let k = table.k();
    let n = k.len() as f64;
    let m = k.iter().sum::<f64>() / n;
    k.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

#[derive(Debug, Clone, Serialize)]
pub struct SabrCaseReport {
    pub case: SabrCase,
    pub terminal_variance: Estimate,
    pub aggregate: f64,
    pub dispersion: f64,
    /// `max |u c - λ/T|`.
    pub max_deviation_from_parity: f64,
}

pub fn sabr_case_report(case: SabrCase, lambda: f64, src: &dyn PathSource) -> Result<SabrCaseReport> {
    let policy = sabr_policy(case, lambda, src)?;
    let var = investment_value(policy.as_ref(), src, 0.0)?.terminal_variance;
    let table = sabr_marginal(policy.as_ref(), src)?;
    let grid = src.grid();
    let k = table.k();
    let level = lambda / grid.horizon();
    let aggregate = k.iter().sum::<f64>() * grid.dt() / table.n_paths as f64;
    Ok(SabrCaseReport {
        case,
        terminal_variance: var,
        aggregate,
        dispersion: contribution_dispersion(&table),
        max_deviation_from_parity: k.iter().fold(0.0f64, |m, v| m.max((v - level).abs())),
    })
}

// ---------------------------------------------------------------------------
// mean-variance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvParams {
    /// Bond rate.
    pub r: f64,
    /// Stock drift.
    pub b: f64,
    /// Stock variance rate `σσᵀ`.
    pub sigma_sq: f64,
    /// Risk tolerance.
    pub tau: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl Default for MvParams {
    fn default() -> Self {
        Self { r: 0.06, b: 0.12, sigma_sq: 0.15 * 0.15, tau: 1.0, x0: 1.0, horizon: 1.0 }
    }
}

impl MvParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_sq > 0.0 && self.sigma_sq.is_finite()) {
            return Err(invalid("mv: sigma_sq must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("mv: tau must be positive"));
        }
        if !(self.x0 > 0.0) {
            return Err(invalid("mv: x0 must be positive"));
        }
        if !(self.horizon > 0.0) || !self.r.is_finite() || !self.b.is_finite() {
            return Err(invalid("mv: invalid horizon or rates"));
        }
        Ok(())
    }

    /// `(b - r)² / σσᵀ`.
    pub fn theta_sq(&self) -> f64 {
        (self.b - self.r).powi(2) / self.sigma_sq
    }

    /// `(b - r) / σσᵀ`.
    pub fn slope(&self) -> f64 {
        (self.b - self.r) / self.sigma_sq
    }

    /// Discounted wealth target `(2τ x0 e^{rT} + e^{θ²T}) / (2τ) · e^{-r(T-t)}`.
    pub fn target(&self, t: f64) -> f64 {
        let g = (2.0 * self.tau * self.x0 * (self.r * self.horizon).exp() + (self.theta_sq() * self.horizon).exp())
            / (2.0 * self.tau);
        g * (-self.r * (self.horizon - t)).exp()
    }

    /// Bond-stock market with unit initial prices.
    pub fn model(&self) -> Result<BondStock> {
        self.validate()?;
        BondStock::new(BondParams { rate: self.r, s0: 1.0 }, 1.0, self.b, self.sigma_sq.sqrt())
    }
}

/// Money allocation `(M⁰, M¹)` at `(t, X)`.
pub fn mv_policy(params: &MvParams, t: f64, x: f64) -> (f64, f64) {
    let m1 = params.slope() * (params.target(t) - x);
    (x - m1, m1)
}

/// Shares `u = M ⊘ S` on a bond-stock ensemble.
#[derive(Debug, Clone)]
pub struct MvPolicy {
    pub params: MvParams,
}

impl Policy for MvPolicy {
    fn name(&self) -> String {
        "mean_variance".into()
    }
    fn n_assets(&self) -> usize {
        2
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        let s = ctx.history().current_value();
        let (m0, m1) = mv_policy(&self.params, ctx.t, ctx.wealth);
        out[0] = m0 / s[0];
        out[1] = m1 / s[1];
    }
}

/// `E[X_T] = x0 e^{rT} + (e^{θ²T} - 1) / (2τ)`.
pub fn mv_expected_terminal(params: &MvParams) -> f64 {
    let t = params.horizon;
    params.x0 * (params.r * t).exp() + ((params.theta_sq() * t).exp() - 1.0) / (2.0 * params.tau)
}

/// The simplified printed expression `x0 [(e^{θ²T} - 1) + e^{T(r - θ²)}]`,
/// kept as a reference value only.
pub fn mv_expected_terminal_printed(params: &MvParams) -> f64 {
    let t = params.horizon;
    let th = params.theta_sq();
    params.x0 * (((th * t).exp() - 1.0) + (t * (params.r - th)).exp())
}

/// Risk contributions of the mean-variance policy at `(t, X)` in the money
/// manner, with their polynomial coefficients `[c0, c1, c2]` in `X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MvContribution {
    pub k0: f64,
    pub k1: f64,
    pub k0_coef: [f64; 3],
    pub k1_coef: [f64; 3],
}

fn poly_mul(a: [f64; 2], b: [f64; 2]) -> [f64; 3] {
    [a[0] * b[0], a[0] * b[1] + a[1] * b[0], a[1] * b[1]]
}

fn poly_eval(c: &[f64; 3], x: f64) -> f64 {
    c[0] + x * (c[1] + x * c[2])
}

/// Coefficients of `K⁰`, `K¹` in `X` at time `t`.
pub fn mv_contribution_coefficients(params: &MvParams, t: f64) -> ([f64; 3], [f64; 3]) {
    let p = params.slope();
    let g = params.target(t);
    let ext = mv_expected_terminal(params);
    let (r, b, s2, x0) = (params.r, params.b, params.sigma_sq, params.x0);
    // M¹ = p g - p X,  M⁰ = X - M¹
    let m1 = [p * g, -p];
    let m0 = [-p * g, 1.0 + p];
    // per-money marginals: bond 2rX - r(E X_T + x0); stock 2bX + σ² M¹ - b(E X_T + x0)
    let c0 = [-r * (ext + x0), 2.0 * r];
    let c1 = [s2 * m1[0] - b * (ext + x0), 2.0 * b + s2 * m1[1]];
    (poly_mul(m0, c0), poly_mul(m1, c1))
}

pub fn mv_risk_contribution(params: &MvParams, t: f64, x: f64) -> MvContribution {
    let (k0_coef, k1_coef) = mv_contribution_coefficients(params, t);
    MvContribution { k0: poly_eval(&k0_coef, x), k1: poly_eval(&k1_coef, x), k0_coef, k1_coef }
}

#[derive(Debug, Clone, Serialize)]
pub struct Figure2Row {
    pub sweep: String,
    pub value: f64,
    pub x: f64,
    pub k0: f64,
    pub k1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Figure2Summary {
    pub sweep: String,
    pub value: f64,
    pub k0_x2: f64,
    pub k1_x2: f64,
    /// Real roots of `K¹(X)`, ascending.
    pub k1_roots: Option<(f64, f64)>,
    /// `K¹ > 0` between the roots and `< 0` outside.
    pub central_positive: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Figure2Table {
    pub t: f64,
    pub rows: Vec<Figure2Row>,
    pub summary: Vec<Figure2Summary>,
}

fn quadratic_roots(c: &[f64; 3]) -> Option<(f64, f64)> {
    let (a, b, cc) = (c[2], c[1], c[0]);
    if a == 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * cc;
    if disc <= 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (r1, r2) = (q / a, cc / q);
    Some((r1.min(r2), r1.max(r2)))
}

/// `(X, K⁰, K¹)` over an `X` grid for each swept `x0` and `τ`.
pub fn figure2_table(
    params: &MvParams,
    t: f64,
    x_range: (f64, f64, usize),
    x0_list: &[f64],
    tau_list: &[f64],
) -> Result<Figure2Table> {
    params.validate()?;
    let (lo, hi, n) = x_range;
    if n < 2 || !(hi > lo) {
        return Err(invalid("X range needs lo < hi and at least two points"));
    }
    if !(0.0..=params.horizon).contains(&t) {
        return Err(invalid("t must lie in [0, T]"));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let sweeps = x0_list
        .iter()
        .map(|&v| ("x0", v, MvParams { x0: v, ..*params }))
        .chain(tau_list.iter().map(|&v| ("tau", v, MvParams { tau: v, ..*params })));
    for (name, value, p) in sweeps {
        p.validate()?;
        let (c0, c1) = mv_contribution_coefficients(&p, t);
        for j in 0..n {
            let x = lo + (hi - lo) * j as f64 / (n - 1) as f64;
            rows.push(Figure2Row { sweep: name.into(), value, x, k0: poly_eval(&c0, x), k1: poly_eval(&c1, x) });
        }
        let roots = quadratic_roots(&c1);
        let central_positive = match roots {
            Some((a, b)) => c1[2] < 0.0 && poly_eval(&c1, 0.5 * (a + b)) > 0.0,
            None => false,
        };
        summary.push(Figure2Summary { sweep: name.into(), value, k0_x2: c0[2], k1_x2: c1[2], k1_roots: roots, central_positive });
    }
    Ok(Figure2Table { t, rows, summary })
}

#[derive(Debug, Clone, Serialize)]
pub struct MvSimulationReport {
    pub expected_terminal: f64,
    pub terminal_mean: Estimate,
    pub terminal_variance: Estimate,
    /// `E ∫ (K⁰ + K¹) dt`.
    pub aggregate: Estimate,
}

/// Simulates the mean-variance policy on a bond-stock ensemble.
pub fn mv_simulation(params: &MvParams, src: &dyn PathSource) -> Result<MvSimulationReport> {
    let policy: PolicyRef = Arc::new(MvPolicy { params: *params });
    let inv = investment_value(policy.as_ref(), src, params.x0)?;
    let cp = crate::contribution::ContributionProcess::new(policy, src, params.x0)?;
    Ok(MvSimulationReport {
        expected_terminal: mv_expected_terminal(params),
        terminal_mean: inv.terminal_mean,
        terminal_variance: inv.terminal_variance,
        aggregate: crate::contribution::aggregate_risk(&cp)?,
    })
}

// ---------------------------------------------------------------------------
// registry

/// Builds a policy once the ensemble is known.
pub trait PolicyBuilder: Send + Sync {
    fn build(&self, src: &dyn PathSource, x0: f64) -> Result<PolicyRef>;
}

struct FnBuilder<F>(F);

impl<F> PolicyBuilder for FnBuilder<F>
where
    F: Fn(&dyn PathSource, f64) -> Result<PolicyRef> + Send + Sync,
{
    fn build(&self, src: &dyn PathSource, x0: f64) -> Result<PolicyRef> {
        (self.0)(src, x0)
    }
}

pub type BuilderBox = Box<dyn PolicyBuilder>;

fn builder(f: impl Fn(&dyn PathSource, f64) -> Result<PolicyRef> + Send + Sync + 'static) -> BuilderBox {
    Box::new(FnBuilder(f))
}

/// `u = a + b (X - x0)` per asset.
#[derive(Debug, Clone)]
pub struct WealthFeedbackPolicy {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Policy for WealthFeedbackPolicy {
    fn name(&self) -> String {
        "wealth_feedback".into()
    }
    fn n_assets(&self) -> usize {
        self.a.len()
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        let m = ctx.wealth - ctx.x0;
        for i in 0..out.len() {
            out[i] = self.a[i] + self.b[i] * m;
        }
    }
}

/// Registered policies: `constant`, `wealth_feedback`, `vol_managed`, `mean_variance`,
/// `sabr_parity`, `sabr_h_projection`, `sabr_deterministic`, `sabr_single_period`.
pub fn policy_registry() -> &'static Registry<BuilderBox> {
    static REG: OnceLock<Registry<BuilderBox>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<BuilderBox> = Registry::new("policy");
        r.register("constant", |p| {
            let u: Vec<f64> = field(p, "shares")?;
            Ok(builder(move |_, _| Ok(Arc::new(ConstantPolicy::new(u.clone())) as PolicyRef)))
        });
        r.register("wealth_feedback", |p| {
            let a: Vec<f64> = field(p, "a")?;
            let b: Vec<f64> = field(p, "b")?;
            if a.len() != b.len() {
                return Err(invalid("wealth_feedback: a and b differ in length"));
            }
            Ok(builder(move |_, _| Ok(Arc::new(WealthFeedbackPolicy { a: a.clone(), b: b.clone() }) as PolicyRef)))
        });
        r.register("vol_managed", |p| {
            let c: f64 = field(p, "c_hat")?;
            Ok(builder(move |src, _| Ok(Arc::new(vol_managed_policy(c, src)?) as PolicyRef)))
        });
        r.register("mean_variance", |p| {
            let params: MvParams = serde_json::from_value(p.clone()).map_err(|e| invalid(format!("mean_variance: {e}")))?;
            params.validate()?;
            Ok(builder(move |_, _| Ok(Arc::new(MvPolicy { params }) as PolicyRef)))
        });
        for case in SabrCase::ALL {
            r.register(&format!("sabr_{}", case.name()), move |p| {
                let lambda: f64 = field(p, "lambda")?;
                Ok(builder(move |src, _| sabr_policy(case, lambda, src)))
            });
        }
        r
    })
}

/// Builds a policy from `{"type": name, ...params}`.
pub fn policy_from_json(v: &Value, src: &dyn PathSource, x0: f64) -> Result<PolicyRef> {
    let name: String = field(v, "type")?;
    let b = policy_registry().build(&name, v)?;
    let policy = b.build(src, x0)?;
    if policy.n_assets() != src.n_assets() {
        return Err(invalid(format!("policy '{name}' has {} assets, model has {}", policy.n_assets(), src.n_assets())));
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{LazyEnsemble, PathEnsemble};
    use crate::grid::TimeGrid;
    use crate::market::{Gbm, GbmParams};

    fn sabr_ens(p: SabrParams, n: usize, steps: usize, seed: u64) -> PathEnsemble {
        PathEnsemble::from(&LazyEnsemble::new(Arc::new(Sabr::new(p).unwrap()), TimeGrid::new(1.0, steps).unwrap(), n, seed))
    }

    #[test]
    fn constant_vol_gives_constant_policy_and_inverse_square() {
        let m: Arc<dyn MarketModel> = Arc::new(Gbm::new(GbmParams::scalar(1.0, 0.0, 0.2)).unwrap());
        let m2: Arc<dyn MarketModel> = Arc::new(Gbm::new(GbmParams::scalar(1.0, 0.0, 0.4)).unwrap());
        let e = PathEnsemble::from(&LazyEnsemble::new(m.clone(), TimeGrid::new(1.0, 4).unwrap(), 3, 1));
        let (a, b) = (VolManagedPolicy::new(0.1, m).unwrap(), VolManagedPolicy::new(0.1, m2).unwrap());
        let path = e.path(1);
        let (mut ua, mut ub) = ([0.0], [0.0]);
        for k in 0..4 {
            let ctx = StepContext::new(k, 0.0, 1, 0.0, 0.0, &path);
            a.shares(&ctx, &mut ua);
            b.shares(&ctx, &mut ub);
            assert!((ua[0] - 2.5).abs() < 1e-12);
            assert!((ub[0] - ua[0] / 4.0).abs() < 1e-12);
        }
        assert_eq!(a.cap_hit_fraction(&e), 0.0);
    }

    #[test]
    fn long_term_zero_signal_shrinks() {
        let m: Arc<dyn MarketModel> = Arc::new(Gbm::new(GbmParams::scalar(1.0, 0.0, 0.1)).unwrap());
        let short = LazyEnsemble::new(m.clone(), TimeGrid::new(10.0, 120).unwrap(), 2000, 3);
        let long = LazyEnsemble::new(m, TimeGrid::new(50.0, 600).unwrap(), 2000, 3);
        let a = vol_managed_long_term(&short, 0.1, 1.0).unwrap();
        let b = vol_managed_long_term(&long, 0.1, 1.0).unwrap();
        assert!(a.iter().chain(&b).all(|p| p.average_signal == 0.0));
        assert!(b[2].mean_abs_gap < a[2].mean_abs_gap);
    }

    #[test]
    fn parity_contribution_is_flat() {
        let p = SabrParams { f0: 1.0, s: 0.2, alpha: 0.4, beta: 0.5, rho: 0.0 };
        let e = sabr_ens(p, 200, 20, 4);
        let r = sabr_case_report(SabrCase::Parity, 0.04, &e).unwrap();
        assert!(r.max_deviation_from_parity <= 1e-12);
        assert!(r.dispersion <= 1e-24);
    }

    #[test]
    fn sabr_marginal_matches_generic_contribution() {
        let p = SabrParams { f0: 1.0, s: 0.2, alpha: 0.4, beta: 0.7, rho: 0.0 };
        let e = sabr_ens(p, 50, 10, 5);
        let u: PolicyRef = Arc::new(ConstantPolicy::new(vec![0.7]));
        let t = sabr_marginal(u.as_ref(), &e).unwrap();
        let g = crate::contribution::ContributionProcess::new(u, &e, 0.0).unwrap().materialize();
        for i in 0..t.c.len() {
            assert!((t.c[i] - g.c[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn normal_limits() {
        // β̂ = 0: c = u σ², independent of F; α̂ = 0 makes parity and projection coincide
        let p = SabrParams { f0: 5.0, s: 0.2, alpha: 0.0, beta: 0.0, rho: 0.0 };
        let e = sabr_ens(p, 400, 8, 6);
        let u: PolicyRef = Arc::new(ConstantPolicy::new(vec![2.0]));
        let t = sabr_marginal(u.as_ref(), &e).unwrap();
        assert!(t.c.iter().all(|c| (c - 2.0 * 0.04).abs() < 1e-15));
        let a = sabr_policy(SabrCase::Parity, 0.04, &e).unwrap();
        let b = sabr_policy(SabrCase::HProjection, 0.04, &e).unwrap();
        let path = e.path(7);
        let (mut ua, mut ub) = ([0.0], [0.0]);
        for k in 0..8 {
            let ctx = StepContext::new(k, 0.0, 7, 0.0, 0.0, &path);
            a.shares(&ctx, &mut ua);
            b.shares(&ctx, &mut ub);
            assert!((ua[0] - ub[0]).abs() <= 1e-10 * ua[0]);
        }
    }

    #[test]
    fn sabr_rejects_bad_inputs() {
        let e = sabr_ens(SabrParams { f0: 1.0, s: 0.2, alpha: 0.4, beta: 0.5, rho: 0.0 }, 10, 4, 1);
        assert!(sabr_policy(SabrCase::Parity, 0.0, &e).is_err());
        let m: Arc<dyn MarketModel> = Arc::new(Gbm::new(GbmParams::scalar(1.0, 0.0, 0.2)).unwrap());
        let g = LazyEnsemble::new(m, TimeGrid::new(1.0, 4).unwrap(), 3, 1);
        assert!(matches!(sabr_policy(SabrCase::Parity, 0.1, &g), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn mv_examples() {
        let p = MvParams::default();
        assert!((p.slope() - 2.0 / 0.75).abs() < 1e-12);
        assert!((p.theta_sq() - 0.16).abs() < 1e-15);
        let no_premium = MvParams { b: 0.06, ..p };
        assert_eq!(mv_policy(&no_premium, 0.3, 1.7).1, 0.0);
        assert!((mv_expected_terminal(&no_premium) - 0.06f64.exp()).abs() < 1e-15);
        let tgt = p.target(0.4);
        assert!(mv_policy(&p, 0.4, tgt).1.abs() < 1e-14);
        assert!((mv_expected_terminal(&p) - 1.148591982041265).abs() < 1e-12);
        assert!((mv_expected_terminal_printed(&p) - 1.0783482890277698).abs() < 1e-12);
    }

    #[test]
    fn mv_contribution_structure() {
        let p = MvParams::default();
        let (c0, c1) = mv_contribution_coefficients(&p, 0.5);
        assert!((c0[2] - 2.0 * p.r * (p.sigma_sq + p.b - p.r) / p.sigma_sq).abs() < 1e-12);
        assert!((c1[2] - (p.r * p.r - p.b * p.b) / p.sigma_sq).abs() < 1e-12);
        // no premium: no stock, bond-only contribution
        let np = MvParams { b: p.r, ..p };
        let ext = mv_expected_terminal(&np);
        for x in [0.5, 1.0, 2.0] {
            let k = mv_risk_contribution(&np, 0.5, x);
            assert!(k.k1.abs() < 1e-15);
            let want = 2.0 * np.r * x * x - np.r * x * (ext + np.x0);
            assert!((k.k0 - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mv_coefficients_match_generic_money_manner() {
        // evaluate the generic contribution of the MV policy on a path and compare
        let p = MvParams::default();
        let model: Arc<dyn MarketModel> = Arc::new(p.model().unwrap());
        let e = PathEnsemble::from(&LazyEnsemble::new(model, TimeGrid::new(1.0, 8).unwrap(), 20, 2));
        let pol: PolicyRef = Arc::new(MvPolicy { params: p });
        let ext = mv_expected_terminal(&p);
        let cp = crate::contribution::ContributionProcess::with_mean(pol, &e, p.x0, ext - p.x0).unwrap();
        for path in 0..5 {
            let pc = cp.path(path);
            for k in 0..8 {
                let x = p.x0 + pc.gain[k];
                let kk = mv_risk_contribution(&p, k as f64 / 8.0, x);
                let gk = pc.k();
                assert!((gk[2 * k] - kk.k0).abs() < 1e-12 * (1.0 + kk.k0.abs()));
                assert!((gk[2 * k + 1] - kk.k1).abs() < 1e-12 * (1.0 + kk.k1.abs()));
            }
        }
    }

    #[test]
    fn figure2_structure() {
        let p = MvParams::default();
        let t = figure2_table(&p, 0.5, (-2.0, 5.0, 71), &[0.5, 1.0, 2.0], &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(t.rows.len(), 6 * 71);
        let base = &t.summary[1];
        assert!(base.k0_x2 > 0.0 && base.k1_x2 < 0.0);
        assert!(base.k1_roots.is_some() && base.central_positive);
        for s in &t.summary {
            assert_eq!(s.k0_x2, base.k0_x2);
            assert_eq!(s.k1_x2, base.k1_x2);
        }
        assert!(figure2_table(&p, 0.5, (1.0, 0.0, 5), &[1.0], &[]).is_err());
    }

    #[test]
    fn registry_builds_policies() {
        let m: Arc<dyn MarketModel> = Arc::new(Gbm::new(GbmParams::scalar(1.0, 0.0, 0.2)).unwrap());
        let e = LazyEnsemble::new(m, TimeGrid::new(1.0, 4).unwrap(), 3, 1);
        let v = serde_json::json!({"type": "constant", "shares": [1.5]});
        assert_eq!(policy_from_json(&v, &e, 0.0).unwrap().as_constant(), Some(&[1.5][..]));
        let bad = serde_json::json!({"type": "constant", "shares": [1.5, 2.0]});
        assert!(policy_from_json(&bad, &e, 0.0).is_err());
        assert!(policy_registry().contains("sabr_h_projection"));
    }
}
