//! Acceptance checks with a deterministic, machine-readable report.
//!
//! Every check derives its own seed from the run seed, so the report is a
//! pure function of `(seed, max_paths, fault)` and does not depend on the
//! worker count.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::barrier::BarrierOptions;
use crate::budgeting::{
    embedding_search, project_budget, solve_budget_iterative, solve_budget_pointwise, BudgetProblem, BudgetRef,
    DeterministicBudget, InformationClass, LambdaOverT, VolManagedBudget,
};
use crate::contribution::{
    aggregate_risk, covariance_report, gateaux_constant_batch, gateaux_oracle, investment_value, ContributionProcess,
};
use crate::deviation::{DeviationMeasure, FiniteSampleSpace, StandardDeviation};
use crate::ensemble::{materialize, LazyEnsemble, PathSource};
use crate::error::{Error, Result};
use crate::grid::make_time_grid;
use crate::market::{Gbm, GbmParams, MarketModel, Sabr, SabrParams};
use crate::policy::{ConstantPolicy, PolicyRef, DEFAULT_U_MAX};
use crate::single_period::{
    euler_residual, min_variance_weights, risk_budget_weights, risk_contribution_sp, std_risk, BudgetVector,
    RiskMeasure, SinglePeriodMarket,
};
use crate::strategies::{
    figure2_table, mv_contribution_coefficients, mv_simulation, sabr_case_report, MvParams, SabrCase,
    WealthFeedbackPolicy,
};

/// Test hooks that deliberately break a check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// Multiplies the aggregated risk by `factor` before comparing it with
    /// the terminal variance.
    ConventionFactor { factor: f64 },
}

impl Fault {
    pub fn parse(name: &str) -> Result<Fault> {
        match name {
            "convention" | "convention_factor" => Ok(Fault::ConventionFactor { factor: 0.5 }),
            other => Err(Error::InvalidArgument(format!("unknown fault '{other}' (known: convention)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Caps the path count of every check.
    pub max_paths: Option<usize>,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 20240501, max_paths: None, fault: None }
    }
}

impl VerifyConfig {
    fn paths(&self, n: usize) -> usize {
        self.max_paths.map_or(n, |m| n.min(m.max(2)))
    }

    fn seed_for(&self, id: u32) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(u64::from(id) * 1_000_003)
    }

    fn convention_factor(&self) -> f64 {
        match self.fault {
            Some(Fault::ConventionFactor { factor }) => factor,
            None => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub id: u32,
    pub name: String,
    pub suite: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub max_paths: Option<usize>,
    pub fault: Option<Fault>,
    pub filter: Option<String>,
    pub passed: bool,
    pub failed: Vec<String>,
    pub checks: Vec<CheckReport>,
}

type CheckFn = fn(&VerifyConfig, &mut Metrics) -> Result<bool>;

/// A named acceptance check.
#[derive(Clone, Copy)]
pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub suite: &'static str,
    run: CheckFn,
}

impl Check {
    pub fn run(&self, cfg: &VerifyConfig) -> CheckReport {
        let mut m = Metrics::default();
        let (passed, detail) = match (self.run)(cfg, &mut m) {
            Ok(p) => (p, m.notes.join("; ")),
            Err(e) => (false, format!("error: {e}")),
        };
        CheckReport {
            id: self.id,
            name: self.name.to_string(),
            suite: self.suite.to_string(),
            passed,
            metrics: m.values,
            detail,
        }
    }

    pub fn matches(&self, filter: &str) -> bool {
        filter.split(',').map(str::trim).any(|f| f == self.suite || f == self.name || f == self.id.to_string())
    }
}

#[derive(Default)]
pub struct Metrics {
    values: BTreeMap<String, f64>,
    notes: Vec<String>,
}

impl Metrics {
    fn set(&mut self, key: impl Into<String>, v: f64) {
        self.values.insert(key.into(), v);
    }

    fn fail(&mut self, note: impl Into<String>) -> bool {
        self.notes.push(note.into());
        false
    }

    fn require(&mut self, ok: bool, note: impl Into<String>) -> bool {
        if !ok {
            self.notes.push(note.into());
        }
        ok
    }
}

pub fn checks() -> Vec<Check> {
    vec![
        Check { id: 1, name: "euler_single_period", suite: "single_period", run: check_euler_single_period },
        Check { id: 2, name: "example_covariance", suite: "single_period", run: check_example_covariance },
        Check { id: 3, name: "deviation_axioms", suite: "single_period", run: check_deviation_axioms },
        Check { id: 4, name: "gbm_variance", suite: "market", run: check_gbm_variance },
        Check { id: 5, name: "aggregation", suite: "contribution", run: check_aggregation },
        Check { id: 6, name: "gateaux", suite: "contribution", run: check_gateaux },
        Check { id: 7, name: "covariance_symmetry", suite: "contribution", run: check_covariance_symmetry },
        Check { id: 8, name: "vol_managed", suite: "strategies", run: check_vol_managed },
        Check { id: 9, name: "sabr_cases", suite: "strategies", run: check_sabr_cases },
        Check { id: 10, name: "mean_variance", suite: "strategies", run: check_mean_variance },
        Check { id: 11, name: "embedding", suite: "budgeting", run: check_embedding },
        Check { id: 12, name: "projection", suite: "budgeting", run: check_projection },
        Check { id: 13, name: "determinism", suite: "determinism", run: check_determinism },
    ]
}

pub fn check_by_name(name: &str) -> Option<Check> {
    checks().into_iter().find(|c| c.name == name)
}

/// Runs every check matching `filter` (suite, name or id; comma separated).
pub fn run_verify(cfg: &VerifyConfig, filter: Option<&str>) -> Result<VerifyReport> {
    let selected: Vec<Check> = checks().into_iter().filter(|c| filter.is_none_or(|f| c.matches(f))).collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!("filter '{}' selects no check", filter.unwrap_or(""))));
    }
    let reports: Vec<CheckReport> = selected.iter().map(|c| c.run(cfg)).collect();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    Ok(VerifyReport {
        seed: cfg.seed,
        max_paths: cfg.max_paths,
        fault: cfg.fault,
        filter: filter.map(str::to_string),
        passed: failed.is_empty(),
        failed,
        checks: reports,
    })
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn gbm(s0: &[f64], drift: &[f64], sigma: Vec<Vec<f64>>) -> Result<Arc<dyn MarketModel>> {
    Ok(Arc::new(Gbm::new(GbmParams { s0: s0.to_vec(), drift: drift.to_vec(), sigma })?))
}

// ---------------------------------------------------------------------------
// single period

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.01
}

fn check_euler_single_period(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(1));
    let (mut worst_std, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let d = rng.random_range(1..=8);
        let market = SinglePeriodMarket::new(random_spd(&mut rng, d))?;
        let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        worst_std = worst_std.max(euler_residual(&market, &w, RiskMeasure::Std)?);
        worst_var = worst_var.max(euler_residual(&market, &w, RiskMeasure::Variance)?);
    }
    m.set("max_residual_std", worst_std);
    m.set("max_residual_variance", worst_var);
    Ok(m.require(worst_std <= 1e-10 && worst_var <= 1e-10, "Euler residual above 1e-10"))
}

/// Covariance matrix of the three-asset worked example.
pub fn example_covariance() -> Vec<Vec<f64>> {
    vec![vec![0.09, 0.048, 0.0225], vec![0.048, 0.04, 0.009], vec![0.0225, 0.009, 0.0225]]
}

/// Newton iteration on `y ⊙ (Λy) = 𝟙/d`, `y > 0`, followed by normalisation.
pub fn newton_risk_parity(cov: &DMatrix<f64>) -> Option<Vec<f64>> {
    let d = cov.nrows();
    let target = 1.0 / d as f64;
    let mut y = DVector::from_fn(d, |i, _| (target / cov[(i, i)]).sqrt());
    for _ in 0..100 {
        let ly = cov * &y;
        let f = DVector::from_fn(d, |i, _| y[i] * ly[i] - target);
        if f.amax() < 1e-15 {
            break;
        }
        let mut jac = DMatrix::from_fn(d, d, |i, j| y[i] * cov[(i, j)]);
        for i in 0..d {
            jac[(i, i)] += ly[i];
        }
        let step = jac.lu().solve(&f)?;
        let mut t = 1.0;
        while (0..d).any(|i| y[i] - t * step[i] <= 0.0) {
            t *= 0.5;
        }
        y -= step * t;
    }
    let s = y.sum();
    Some(y.iter().map(|v| v / s).collect())
}

fn check_example_covariance(_cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let market = SinglePeriodMarket::from_rows(&example_covariance())?;
    let rp = risk_budget_weights(&market, &BudgetVector::equal(3), BarrierOptions::default())?;
    let w_rp = rp.weights.as_slice().to_vec();
    let k = risk_contribution_sp(&market, &w_rp, RiskMeasure::Std)?;
    let kbar = k.iter().sum::<f64>() / 3.0;
    let spread = k.iter().map(|v| (v - kbar).abs()).fold(0.0, f64::max) / kbar;
    let w_mv = min_variance_weights(&market).0;
    let w_ew = vec![1.0 / 3.0; 3];
    let (s_mv, s_rp, s_ew) = (std_risk(&market, &w_mv), std_risk(&market, &w_rp), std_risk(&market, &w_ew));
    let oracle = newton_risk_parity(market.covariance()).ok_or_else(|| Error::Convergence { iterations: 100, residual: f64::NAN })?;
    let oracle_gap = w_rp.iter().zip(&oracle).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    m.set("rp_contribution_spread", spread);
    m.set("mv_weight_1", w_mv[0]);
    m.set("sigma_mv", s_mv);
    m.set("sigma_rp", s_rp);
    m.set("sigma_ew", s_ew);
    m.set("rp_oracle_gap", oracle_gap);
    let mut ok = m.require(spread <= 1e-8, "risk-parity contributions differ");
    ok &= m.require(w_mv[0] < 0.0, "min-variance weight on asset 1 is not negative");
    ok &= m.require(s_mv <= s_rp && s_rp <= s_ew, "volatility ordering mv <= rp <= ew violated");
    ok &= m.require(oracle_gap <= 1e-8, "risk-parity weights differ from the Newton oracle");
    Ok(ok)
}

fn check_deviation_axioms(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(3));
    let dev = StandardDeviation;
    let mut worst = [0.0f64; 4];
    let mut ok = true;
    for _ in 0..200 {
        let n = rng.random_range(2..=20);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let space = FiniteSampleSpace::new(raw.iter().map(|p| p / total).collect())?;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let a: f64 = rng.random_range(0.0..5.0);
        let c: f64 = rng.random_range(-10.0..10.0);
        let dx = dev.deviation(&space, &x);
        let dy = dev.deviation(&space, &y);
        let scaled: Vec<f64> = x.iter().map(|v| a * v).collect();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p + q).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let d1 = (dev.deviation(&space, &scaled) - a * dx).abs();
        let d2 = (dev.deviation(&space, &sum) - dx - dy).max(0.0);
        let d3 = (dev.deviation(&space, &shifted) - dx).abs();
        worst[0] = worst[0].max(d1);
        worst[1] = worst[1].max(d2);
        worst[2] = worst[2].max(d3);
        ok &= d1 <= 1e-12 * (1.0 + a * dx) && d2 <= 1e-12 * (dx + dy) && d3 <= 1e-12 * (1.0 + c.abs());
        ok &= dx > 0.0 && dev.deviation(&space, &vec![c; n]) <= 1e-12 * c.abs();
        worst[3] = worst[3].max(dev.deviation(&space, &vec![c; n]));
    }
    m.set("positive_homogeneity", worst[0]);
    m.set("subadditivity_excess", worst[1]);
    m.set("translation", worst[2]);
    m.set("constant_deviation", worst[3]);
    Ok(m.require(ok, "an axiom failed on a sampled space"))
}

// ---------------------------------------------------------------------------
// market and contribution

fn check_gbm_variance(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let (s0, b, sigma, u) = (1.0, 0.05, 0.2, 1.0);
    let src = LazyEnsemble::new(gbm(&[s0], &[b], vec![vec![sigma]])?, make_time_grid(1.0, 252)?, cfg.paths(100_000), cfg.seed_for(4));
    let var = investment_value(&ConstantPolicy::new(vec![u]), &src, 0.0)?.terminal_variance;
    let exact = u * u * s0 * s0 * (2.0 * b).exp() * ((sigma * sigma).exp() - 1.0);
    let z = (var.mean - exact).abs() / var.stderr;
    m.set("mc_variance", var.mean);
    m.set("stderr", var.stderr);
    m.set("exact", exact);
    m.set("z", z);
    Ok(m.require(z <= 3.0, "variance outside 3 stderr"))
}

fn aggregation_models() -> Result<Vec<Arc<dyn MarketModel>>> {
    Ok(vec![
        gbm(&[1.0], &[0.05], vec![vec![0.2]])?,
        gbm(&[1.0, 0.8], &[0.04, 0.07], vec![vec![0.2, 0.0], vec![0.12, 0.2]])?,
        gbm(
            &[1.0, 1.2, 0.9],
            &[0.03, 0.06, 0.05],
            vec![vec![0.15, 0.0, 0.0], vec![0.05, 0.2, 0.0], vec![0.04, -0.06, 0.25]],
        )?,
    ])
}

/// `|Var(X_T) - factor · E∫uᵀc dt|` in combined stderr units.
pub fn aggregation_z(policy: PolicyRef, src: &dyn PathSource, x0: f64, factor: f64) -> Result<(f64, f64, f64)> {
    let var = investment_value(policy.as_ref(), src, x0)?.terminal_variance;
    let cp = ContributionProcess::new(policy, src, x0)?;
    let agg = aggregate_risk(&cp)?.scaled(factor);
    Ok((var.mean, agg.mean, var.z_score(&agg)))
}

fn check_aggregation(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let factor = cfg.convention_factor();
    let mut ok = true;
    for (i, model) in aggregation_models()?.into_iter().enumerate() {
        let d = model.n_assets();
        let src = LazyEnsemble::new(model, make_time_grid(1.0, 100)?, cfg.paths(100_000), cfg.seed_for(5) + i as u64);
        let constant: PolicyRef = Arc::new(ConstantPolicy::new((0..d).map(|j| 1.0 - 0.2 * j as f64).collect()));
        let feedback: PolicyRef = Arc::new(WealthFeedbackPolicy {
            a: (0..d).map(|j| 0.5 + 0.25 * j as f64).collect(),
            b: (0..d).map(|j| if j % 2 == 0 { 1.5 } else { -0.8 }).collect(),
        });
        for (label, policy) in [("constant", constant), ("feedback", feedback)] {
            let (var, agg, z) = aggregation_z(policy, &src, 1.0, factor)?;
            let key = format!("d{d}_{label}");
            m.set(format!("{key}_variance"), var);
            m.set(format!("{key}_aggregate"), agg);
            m.set(format!("{key}_z"), z);
            if z > 3.0 {
                ok = m.fail(format!("{key}: z = {z:.3}"));
            }
        }
    }
    Ok(ok)
}

/// Random positive `(u, v)` pairs for the Gâteaux check.
pub fn gateaux_pairs(seed: u64, n: usize, d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
            let v = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
            (u, v)
        })
        .collect()
}

/// Low-volatility, strongly correlated, driftless pair of assets.
pub fn gateaux_model() -> Result<Arc<dyn MarketModel>> {
    gbm(&[1.0, 1.0], &[0.0, 0.0], vec![vec![0.01, 0.0], vec![0.0135, 0.00655]])
}

fn check_gateaux(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let seed = cfg.seed_for(6);
    let src = LazyEnsemble::new(gateaux_model()?, make_time_grid(1.0, 2)?, cfg.paths(20_000_000), seed);
    let rows = gateaux_constant_batch(&src, &gateaux_pairs(seed, 20, 2), 1e-4)?;
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    m.set("max_relative_error", worst);
    m.set("paths", src.n_paths() as f64);
    let mut ok = m.require(worst <= 1e-3, format!("slope and pairing differ by {worst:.3e}"));

    // v = u through the generic policy path on a small ensemble
    let small = materialize(&LazyEnsemble::new(gateaux_model()?, make_time_grid(1.0, 8)?, 2_000, seed + 1));
    let u: PolicyRef = Arc::new(ConstantPolicy::new(vec![1.3, -0.4]));
    let slope = gateaux_oracle(&u, &u, &small, 0.0, None)?;
    let var = investment_value(u.as_ref(), &small, 0.0)?.terminal_variance.mean;
    let self_err = rel(slope, 2.0 * var);
    m.set("self_direction_error", self_err);
    ok &= m.require(self_err <= 1e-9, "v = u slope differs from 2 Var");
    Ok(ok)
}

fn check_covariance_symmetry(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let model = gbm(&[1.0, 1.0], &[0.0, 0.0], vec![vec![0.2, 0.0], vec![0.15, 0.26]])?;
    let src = materialize(&LazyEnsemble::new(model, make_time_grid(1.0, 50)?, cfg.paths(100_000), cfg.seed_for(7)));
    let u: PolicyRef = Arc::new(ConstantPolicy::new(vec![1.0, 0.5]));
    let v: PolicyRef = Arc::new(WealthFeedbackPolicy { a: vec![0.3, 1.0], b: vec![0.5, -0.2] });
    let r = covariance_report(&u, &v, &src, 1.0)?;
    m.set("v_on_u", r.v_on_u.mean);
    m.set("u_on_v", r.u_on_v.mean);
    m.set("direct", r.direct.mean);
    m.set("max_z", r.max_z());
    Ok(m.require(r.max_z() <= 3.0, "pairwise z-score above 3"))
}

// ---------------------------------------------------------------------------
// strategies

fn check_vol_managed(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let c_hat = 0.04;
    let model: Arc<dyn MarketModel> =
        Arc::new(Sabr::new(SabrParams { f0: 1.0, s: 0.2, alpha: 0.5, beta: 1.0, rho: 0.0 })?);
    let src = materialize(&LazyEnsemble::new(model, make_time_grid(1.0, 50)?, cfg.paths(10_000), cfg.seed_for(8)));
    let budget: BudgetRef = Arc::new(VolManagedBudget::new(c_hat, 1)?);
    let sol = solve_budget_pointwise(&BudgetProblem::new(&src, budget, InformationClass::Full, 1.0))?;
    let table = ContributionProcess::new(sol.policy.clone(), &src, 1.0)?.materialize();
    let n_steps = src.grid().n_steps();
    let (mut worst, mut cells, mut capped) = (0.0f64, 0usize, 0usize);
    for p in 0..table.n_paths {
        for k in 0..n_steps {
            let u = table.u[table.index(p, k, 0)];
            if u.abs() >= DEFAULT_U_MAX {
                capped += 1;
                continue;
            }
            let s = src.aux_value(p, k, 0);
            worst = worst.max(rel(u, c_hat / (s * s)));
            cells += 1;
        }
    }
    m.set("max_relative_gap", worst);
    m.set("cells", cells as f64);
    m.set("capped_cells", capped as f64);
    Ok(m.require(cells > 0 && worst <= 0.01, format!("policy differs from c/sigma^2 by {worst:.3e}")))
}

/// Parameters of the SABR comparison.
pub fn sabr_check_params() -> SabrParams {
    SabrParams { f0: 1.0, s: 0.2, alpha: 0.4, beta: 0.5, rho: 0.0 }
}

fn check_sabr_cases(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let lambda = 0.04;
    let model: Arc<dyn MarketModel> = Arc::new(Sabr::new(sabr_check_params())?);
    let src = materialize(&LazyEnsemble::new(model, make_time_grid(1.0, 50)?, cfg.paths(20_000), cfg.seed_for(9)));
    let mut ok = true;
    let mut last = f64::NEG_INFINITY;
    for case in SabrCase::ALL {
        let r = sabr_case_report(case, lambda, &src)?;
        let z = (r.terminal_variance.mean - lambda).abs() / r.terminal_variance.stderr;
        let name = case.name();
        m.set(format!("{name}_variance"), r.terminal_variance.mean);
        m.set(format!("{name}_z"), z);
        m.set(format!("{name}_dispersion"), r.dispersion);
        if z > 3.0 {
            ok = m.fail(format!("{name}: variance z = {z:.3}"));
        }
        if case == SabrCase::Parity {
            m.set("parity_max_deviation", r.max_deviation_from_parity);
            if r.max_deviation_from_parity > 1e-10 {
                ok = m.fail("parity contribution is not constant");
            }
        }
        if r.dispersion <= last {
            ok = m.fail(format!("{name}: dispersion does not increase"));
        }
        last = r.dispersion;
    }
    Ok(ok)
}

fn check_mean_variance(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let params = MvParams::default();
    let model: Arc<dyn MarketModel> = Arc::new(params.model()?);
    let src = LazyEnsemble::new(model, make_time_grid(params.horizon, 252)?, cfg.paths(100_000), cfg.seed_for(10));
    let sim = mv_simulation(&params, &src)?;
    let z_mean = (sim.terminal_mean.mean - sim.expected_terminal).abs() / sim.terminal_mean.stderr;
    let z_var = sim.terminal_variance.z_score(&sim.aggregate);
    m.set("expected_terminal", sim.expected_terminal);
    m.set("mc_mean", sim.terminal_mean.mean);
    m.set("z_mean", z_mean);
    m.set("mc_variance", sim.terminal_variance.mean);
    m.set("aggregate", sim.aggregate.mean);
    m.set("z_variance", z_var);
    let mut ok = m.require(z_mean <= 3.0, "terminal mean outside 3 stderr");
    ok &= m.require(z_var <= 3.0, "aggregate outside 3 combined stderr");

    let (c0, c1) = mv_contribution_coefficients(&params, 0.0);
    let s2 = params.sigma_sq;
    let (r, b) = (params.r, params.b);
    let k0_expected = 2.0 * r * (s2 + b - r) / s2;
    let k1_expected = (r * r - b * b) / s2;
    m.set("k0_x2", c0[2]);
    m.set("k1_x2", c1[2]);
    ok &= m.require(rel(c0[2], k0_expected) <= 1e-14 && c0[2] > 0.0, "K0 leading coefficient");
    ok &= m.require(rel(c1[2], k1_expected) <= 1e-14 && c1[2] < 0.0, "K1 leading coefficient");

    let fig = figure2_table(&params, 0.0, (-1.0, 3.0, 9), &[0.5, 1.0, 2.0], &[0.5, 1.0, 2.0])?;
    let invariant = fig.summary.iter().all(|s| s.k0_x2 == c0[2] && s.k1_x2 == c1[2]);
    ok &= m.require(invariant, "sweeps change the leading coefficients");
    Ok(ok)
}

// ---------------------------------------------------------------------------
// budgeting

fn check_embedding(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let model = gbm(&[1.0], &[0.08], vec![vec![0.2]])?;
    let src = materialize(&LazyEnsemble::new(model, make_time_grid(1.0, 50)?, cfg.paths(20_000), cfg.seed_for(11)));
    let budget: BudgetRef = Arc::new(LambdaOverT::new(0.04, 1)?);
    let problem = BudgetProblem::new(&src, budget, InformationClass::Full, 1.0);
    let emb = embedding_search(&problem)?;
    let direct = solve_budget_iterative(&problem)?;
    let gamma = emb.gamma.unwrap_or(f64::NAN);
    let mean = investment_value(emb.policy.as_ref(), &src, 1.0)?.terminal_mean;
    let gap = (gamma + 2.0 * (mean.mean - 1.0)).abs();
    let ue = ContributionProcess::new(emb.policy.clone(), &src, 1.0)?.materialize();
    let ud = ContributionProcess::new(direct.policy.clone(), &src, 1.0)?.materialize();
    let policy_gap = ue.u.iter().zip(&ud.u).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    m.set("gamma", gamma);
    m.set("fixed_point_gap", gap);
    m.set("stderr", 2.0 * mean.stderr);
    m.set("policy_gap", policy_gap);
    m.set("iterations", emb.iterations as f64);
    let mut ok = m.require(emb.converged, "embedding did not converge");
    ok &= m.require(gap <= 3.0 * 2.0 * mean.stderr, "gamma is not -2 E[M_T]");
    ok &= m.require(policy_gap <= 1e-4, "embedded and direct policies differ");
    Ok(ok)
}

fn check_projection(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let model = gbm(&[1.0], &[0.0], vec![vec![0.2]])?;
    let grid = make_time_grid(1.0, 50)?;
    let src = LazyEnsemble::new(model, grid, cfg.paths(100_000), cfg.seed_for(12));
    let table: Vec<f64> = (0..grid.n_steps()).map(|k| 0.02 * (1.0 + grid.t(k))).collect();
    let integral: f64 = table.iter().sum::<f64>() * grid.dt();
    let budget: BudgetRef = Arc::new(DeterministicBudget::new(1, table)?);
    let sol = solve_budget_iterative(&BudgetProblem::new(&src, budget, InformationClass::Constant, 0.0))?;
    let terminal = investment_value(&ConstantPolicy::new(vec![1.0]), &src, 0.0)?.terminal_variance;
    let analytic = (integral / terminal.mean).sqrt();
    let mut buf = src.new_buffer();
    src.load_path(0, &mut buf);
    let mut u = [0.0];
    sol.policy.shares(&crate::policy::StepContext::new(0, 0.0, 0, 0.0, 0.0, &buf), &mut u);
    let gap = rel(u[0], analytic);
    m.set("constant_policy", u[0]);
    m.set("analytic", analytic);
    m.set("constant_gap", gap);
    let mut ok = m.require(gap <= 0.01, "constant-class policy differs from the analytic value");

    let fine: BudgetRef = Arc::new(VolManagedBudget::new(0.04, 1)?);
    let coarse = InformationClass::Deterministic;
    let projected = project_budget(&fine, &coarse, &src)?;
    let a = solve_budget_iterative(&BudgetProblem::new(&src, fine, coarse.clone(), 0.0))?;
    let b = solve_budget_iterative(&BudgetProblem::new(&src, projected, coarse, 0.0))?;
    let (mut ua, mut ub) = ([0.0], [0.0]);
    let mut worst = 0.0f64;
    for k in 0..grid.n_steps() {
        let ctx = crate::policy::StepContext::new(k, grid.t(k), 0, 0.0, 0.0, &buf);
        a.policy.shares(&ctx, &mut ua);
        b.policy.shares(&ctx, &mut ub);
        worst = worst.max(rel(ua[0], ub[0]));
    }
    m.set("projection_gap", worst);
    ok &= m.require(worst <= 1e-8, "coarse solve differs between fine and projected budgets");
    Ok(ok)
}

// ---------------------------------------------------------------------------
// determinism

fn determinism_probe(cfg: &VerifyConfig) -> Result<String> {
    let model = aggregation_models()?.swap_remove(1);
    let src = LazyEnsemble::new(model, make_time_grid(1.0, 20)?, cfg.paths(5_000), cfg.seed_for(13));
    let policy: PolicyRef = Arc::new(WealthFeedbackPolicy { a: vec![0.5, 0.75], b: vec![1.5, -0.8] });
    let (var, agg, z) = aggregation_z(policy, &src, 1.0, 1.0)?;
    Ok(format!("{:?}", (var.to_bits(), agg.to_bits(), z.to_bits())))
}

fn check_determinism(cfg: &VerifyConfig, m: &mut Metrics) -> Result<bool> {
    let mut outputs = Vec::new();
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        outputs.push(pool.install(|| determinism_probe(cfg))?);
    }
    let same = outputs[0] == outputs[1];
    m.set("identical", if same { 1.0 } else { 0.0 });
    Ok(m.require(same, "results depend on the worker count"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_oracle_on_diagonal() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let w = newton_risk_parity(&cov).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn filter_selects_suite_and_name() {
        let all = checks();
        assert_eq!(all.iter().filter(|c| c.matches("single_period")).count(), 3);
        assert_eq!(all.iter().filter(|c| c.matches("aggregation")).count(), 1);
        assert_eq!(all.iter().filter(|c| c.matches("1,6")).count(), 2);
        assert!(run_verify(&VerifyConfig::default(), Some("nothing")).is_err());
    }

    #[test]
    fn fast_suite_passes_and_is_deterministic() {
        let cfg = VerifyConfig::default();
        let a = serde_json::to_string(&run_verify(&cfg, Some("single_period")).unwrap()).unwrap();
        let b = serde_json::to_string(&run_verify(&cfg, Some("single_period")).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"passed\":true"));
    }

    #[test]
    fn fault_breaks_aggregation() {
        let cfg = VerifyConfig { max_paths: Some(4_000), fault: Some(Fault::parse("convention").unwrap()), ..Default::default() };
        let r = run_verify(&cfg, Some("aggregation")).unwrap();
        assert_eq!(r.failed, vec!["aggregation".to_string()]);
        assert!(Fault::parse("other").is_err());
    }
}
