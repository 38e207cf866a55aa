//! Continuous-time risk budgeting: find `u` with `u ⊙ c^u = β` within an
//! information class.
//!
//! The objective reported is `J(u) = E ∫ -Σ β log u dt + ½ Var(X_T)`, whose
//! first-order condition under `Var = E ∫ uᵀc dt` is exactly `u ⊙ c = β`.
//!
//! Time-local classes (constant-in-cell per step) are solved by a forward
//! sweep: the gains `M_k` only depend on earlier positions, so each (step,
//! cell) reduces to a small barrier system `θ ⊙ (Σ̄ θ + h) = β̄` with
//! `h = avg(2 μ M) - avg(μ) E[M_T]`. The scalar `E[M_T]` is a fixed point
//! found by secant iteration.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::barrier::{solve_barrier, BarrierOptions};
use crate::contribution::{investment_value, ContributionProcess, Walker};
use crate::ensemble::{par_map_paths, PathSource};
use crate::error::{invalid, Error, Result};
use crate::market::MarketModel;
use crate::policy::{
    BinEdges, BinnedPolicy, BinnedTable, ConstantPolicy, DeterministicPolicy, Policy, PolicyKind, PolicyRef,
    StateBinning, StepContext, DEFAULT_U_MAX,
};
use crate::registry::{field, field_or, Registry};
use crate::stats::Estimate;

/// Target risk contribution process `β > 0`.
pub trait Budget: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn n_assets(&self) -> usize;
    /// Finest information the budget depends on.
    fn class(&self) -> InformationClass;
    fn value(&self, ctx: &StepContext, model: &dyn MarketModel, horizon: f64, out: &mut [f64]);
}

pub type BudgetRef = Arc<dyn Budget>;

fn check_positive(v: &[f64]) -> Result<()> {
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(invalid("budget values must be finite and strictly positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantBudget {
    values: Vec<f64>,
}

impl ConstantBudget {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_positive(&values)?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Budget for ConstantBudget {
    fn name(&self) -> String {
        "constant".into()
    }
    fn n_assets(&self) -> usize {
        self.values.len()
    }
    fn class(&self) -> InformationClass {
        InformationClass::Constant
    }
    fn value(&self, _: &StepContext, _: &dyn MarketModel, _: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.values);
    }
}

/// `λ / T` on every asset.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaOverT {
    pub lambda: f64,
    pub n_assets: usize,
}

impl LambdaOverT {
    pub fn new(lambda: f64, n_assets: usize) -> Result<Self> {
        if !(lambda > 0.0) || n_assets == 0 {
            return Err(invalid("lambda must be positive"));
        }
        Ok(Self { lambda, n_assets })
    }
}

impl Budget for LambdaOverT {
    fn name(&self) -> String {
        "lambda_over_t".into()
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn class(&self) -> InformationClass {
        InformationClass::Constant
    }
    fn value(&self, _: &StepContext, _: &dyn MarketModel, horizon: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.lambda / horizon);
    }
}

/// `β_i = (ĉ S_i / σ_i)²` with `σ_i` the relative volatility.
#[derive(Debug, Clone, PartialEq)]
pub struct VolManagedBudget {
    pub c_hat: f64,
    pub n_assets: usize,
}

impl VolManagedBudget {
    pub fn new(c_hat: f64, n_assets: usize) -> Result<Self> {
        if !(c_hat > 0.0) || n_assets == 0 {
            return Err(invalid("c_hat must be positive"));
        }
        Ok(Self { c_hat, n_assets })
    }
}

impl Budget for VolManagedBudget {
    fn name(&self) -> String {
        "vol_managed".into()
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn class(&self) -> InformationClass {
        InformationClass::Full
    }
    fn value(&self, ctx: &StepContext, model: &dyn MarketModel, _: f64, out: &mut [f64]) {
        let h = ctx.history();
        let s = h.current_value();
        model.volatility(ctx.t, s, h.current_aux(), out);
        for i in 0..out.len() {
            let r = self.c_hat * s[i] / out[i];
            out[i] = r * r;
        }
    }
}

/// One vector per step.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicBudget {
    n_assets: usize,
    table: Vec<f64>,
}

impl DeterministicBudget {
    pub fn new(n_assets: usize, table: Vec<f64>) -> Result<Self> {
        if n_assets == 0 || table.is_empty() || table.len() % n_assets != 0 {
            return Err(Error::ShapeMismatch("tabulated budget size".into()));
        }
        check_positive(&table)?;
        Ok(Self { n_assets, table })
    }

    pub fn n_steps(&self) -> usize {
        self.table.len() / self.n_assets
    }

    pub fn at(&self, step: usize) -> &[f64] {
        &self.table[step * self.n_assets..(step + 1) * self.n_assets]
    }
}

impl Budget for DeterministicBudget {
    fn name(&self) -> String {
        "tabulated".into()
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn class(&self) -> InformationClass {
        InformationClass::Deterministic
    }
    fn value(&self, ctx: &StepContext, _: &dyn MarketModel, _: f64, out: &mut [f64]) {
        out.copy_from_slice(self.at(ctx.step.min(self.n_steps() - 1)));
    }
}

#[derive(Debug, Clone)]
pub struct BinnedBudget {
    pub table: BinnedTable,
}

impl BinnedBudget {
    pub fn new(table: BinnedTable) -> Result<Self> {
        check_positive(&table.values)?;
        Ok(Self { table })
    }
}

impl Budget for BinnedBudget {
    fn name(&self) -> String {
        "binned".into()
    }
    fn n_assets(&self) -> usize {
        self.table.n_assets
    }
    fn class(&self) -> InformationClass {
        InformationClass::Feedback(self.table.edges.binning)
    }
    fn value(&self, ctx: &StepContext, _: &dyn MarketModel, _: f64, out: &mut [f64]) {
        let b = self.table.edges.bin_of_context(ctx);
        out.copy_from_slice(self.table.at(ctx.step, b));
    }
}

/// Registered budgets: `constant`, `lambda_over_t`, `vol_managed`, `tabulated`.
pub fn budget_registry() -> &'static Registry<BudgetRef> {
    static REG: OnceLock<Registry<BudgetRef>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<BudgetRef> = Registry::new("budget");
        r.register("constant", |p| Ok(Arc::new(ConstantBudget::new(field(p, "values")?)?) as BudgetRef));
        r.register("lambda_over_t", |p| {
            Ok(Arc::new(LambdaOverT::new(field(p, "lambda")?, field_or(p, "n_assets", 1)?)?) as BudgetRef)
        });
        r.register("vol_managed", |p| {
            Ok(Arc::new(VolManagedBudget::new(field(p, "c_hat")?, field_or(p, "n_assets", 1)?)?) as BudgetRef)
        });
        r.register("tabulated", |p| {
            let rows: Vec<Vec<f64>> = field(p, "values")?;
            let d = rows.first().map(Vec::len).unwrap_or(0);
            if rows.iter().any(|r| r.len() != d) {
                return Err(invalid("tabulated budget rows differ in length"));
            }
            Ok(Arc::new(DeterministicBudget::new(d, rows.concat())?) as BudgetRef)
        });
        r
    })
}

/// Builds a budget from `{"type": name, ...params}`.
pub fn budget_from_json(v: &Value) -> Result<BudgetRef> {
    let name: String = field(v, "type")?;
    budget_registry().build(&name, v)
}

/// Discretised sub-information: what a policy or budget may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class")]
pub enum InformationClass {
    Constant,
    Deterministic,
    Feedback(StateBinning),
    Full,
}

impl InformationClass {
    fn rank(&self) -> u8 {
        match self {
            InformationClass::Constant => 0,
            InformationClass::Deterministic => 1,
            InformationClass::Feedback(_) => 2,
            InformationClass::Full => 3,
        }
    }

    /// Whether every set of `self` is measurable under `finer`.
    pub fn is_coarser_or_equal(&self, finer: &InformationClass) -> bool {
        match (self, finer) {
            (InformationClass::Feedback(a), InformationClass::Feedback(b)) => a == b,
            _ => self.rank() <= finer.rank(),
        }
    }

    pub fn policy_kind(&self) -> PolicyKind {
        match self {
            InformationClass::Constant => PolicyKind::Constant,
            InformationClass::Deterministic => PolicyKind::Deterministic,
            _ => PolicyKind::Feedback,
        }
    }
}

/// Assigns each (path, step) to a cell of a time-local class.
enum CellMap {
    Single,
    Binned(Arc<BinEdges>),
}

impl CellMap {
    fn for_class(class: &InformationClass, src: &dyn PathSource) -> Result<Self> {
        match class {
            InformationClass::Constant | InformationClass::Deterministic => Ok(CellMap::Single),
            InformationClass::Feedback(b) => {
                if b.n_bins == 0 {
                    return Err(invalid("binning needs at least one bin"));
                }
                Ok(CellMap::Binned(Arc::new(BinEdges::estimate(*b, src))))
            }
            InformationClass::Full => Err(invalid("full information has no finite cells")),
        }
    }

    fn n_cells(&self) -> usize {
        match self {
            CellMap::Single => 1,
            CellMap::Binned(e) => e.n_bins(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// `√(β_i / Σ̄_ii)` per asset.
    BetaScaled,
    /// The same value on every asset.
    Uniform,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Barrier tolerance (per cell, scaled by `max(1, max β)`).
    pub tol: f64,
    /// Relative tolerance on the `E[M_T]` fixed point.
    pub mean_tol: f64,
    pub max_iter: usize,
    pub gamma_tol: f64,
    pub gamma_max_iter: usize,
    /// Weight of the new iterate in the embedding update.
    pub damping: f64,
    pub start: StartRule,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            mean_tol: 1e-12,
            max_iter: 200,
            gamma_tol: 1e-6,
            gamma_max_iter: 50,
            damping: 1.0,
            start: StartRule::BetaScaled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub max: f64,
    /// Weighted root-mean-square over cells.
    pub l2: f64,
}

#[derive(Clone)]
pub struct BudgetSolution {
    pub policy: PolicyRef,
    pub class: InformationClass,
    pub residual: Residual,
    /// `E ∫ -Σ β log u dt + ½ Var(X_T)`.
    pub objective: f64,
    pub terminal_variance: Estimate,
    /// `E[M_T]` at the fixed point used by the solver.
    pub mean_gain: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Embedding parameter, when the embedding solver was used.
    pub gamma: Option<f64>,
    pub cap_hits: usize,
}

impl fmt::Debug for BudgetSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BudgetSolution")
            .field("policy", &self.policy.name())
            .field("class", &self.class)
            .field("residual", &self.residual)
            .field("objective", &self.objective)
            .field("iterations", &self.iterations)
            .field("converged", &self.converged)
            .finish()
    }
}

/// Everything a solver needs.
#[derive(Clone)]
pub struct BudgetProblem<'a> {
    pub src: &'a dyn PathSource,
    pub budget: BudgetRef,
    pub class: InformationClass,
    pub x0: f64,
    pub opts: SolveOptions,
}

impl<'a> BudgetProblem<'a> {
    pub fn new(src: &'a dyn PathSource, budget: BudgetRef, class: InformationClass, x0: f64) -> Self {
        Self { src, budget, class, x0, opts: SolveOptions::default() }
    }

    pub fn with_options(mut self, opts: SolveOptions) -> Self {
        self.opts = opts;
        self
    }

    fn validate(&self) -> Result<Arc<dyn MarketModel>> {
        let model = self.src.require_model()?;
        if self.budget.n_assets() != self.src.n_assets() {
            return Err(invalid(format!(
                "budget has {} assets, ensemble has {}",
                self.budget.n_assets(),
                self.src.n_assets()
            )));
        }
        if self.src.n_paths() < 2 {
            return Err(invalid("at least two paths are required"));
        }
        Ok(model)
    }
}

/// A budgeting algorithm selectable by name.
pub trait BudgetSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, problem: &BudgetProblem) -> Result<BudgetSolution>;
}

pub struct PointwiseSolver;
pub struct IterativeSolver;
pub struct EmbeddingSolver;

impl BudgetSolver for PointwiseSolver {
    fn name(&self) -> &'static str {
        "pointwise"
    }
    fn solve(&self, p: &BudgetProblem) -> Result<BudgetSolution> {
        solve_budget_pointwise(p)
    }
}

impl BudgetSolver for IterativeSolver {
    fn name(&self) -> &'static str {
        "iterative"
    }
    fn solve(&self, p: &BudgetProblem) -> Result<BudgetSolution> {
        solve_budget_iterative(p)
    }
}

impl BudgetSolver for EmbeddingSolver {
    fn name(&self) -> &'static str {
        "embedding"
    }
    fn solve(&self, p: &BudgetProblem) -> Result<BudgetSolution> {
        embedding_search(p)
    }
}

pub fn solver_registry() -> &'static Registry<Arc<dyn BudgetSolver>> {
    static REG: OnceLock<Registry<Arc<dyn BudgetSolver>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<Arc<dyn BudgetSolver>> = Registry::new("budget solver");
        r.register("pointwise", |_| Ok(Arc::new(PointwiseSolver) as Arc<dyn BudgetSolver>));
        r.register("iterative", |_| Ok(Arc::new(IterativeSolver) as Arc<dyn BudgetSolver>));
        r.register("embedding", |_| Ok(Arc::new(EmbeddingSolver) as Arc<dyn BudgetSolver>));
        r
    })
}

/// Per (path, step) coefficients that do not depend on the policy.
struct Frame {
    n_paths: usize,
    n_steps: usize,
    d: usize,
    cov: Vec<f64>,
    mu: Vec<f64>,
    ds: Vec<f64>,
    beta: Vec<f64>,
    cell: Vec<u32>,
    driftless: bool,
}

impl Frame {
    fn build(p: &BudgetProblem, model: &dyn MarketModel, cells: &CellMap) -> Result<Frame> {
        let grid = p.src.grid();
        let n = grid.n_steps();
        let d = p.src.n_assets();
        let horizon = grid.horizon();
        let budget = p.budget.as_ref();
        struct Row {
            cov: Vec<f64>,
            mu: Vec<f64>,
            ds: Vec<f64>,
            beta: Vec<f64>,
            cell: Vec<u32>,
        }
        let rows = par_map_paths(p.src, |pi, path| {
            let mut r = Row {
                cov: vec![0.0; n * d * d],
                mu: vec![0.0; n * d],
                ds: vec![0.0; n * d],
                beta: vec![0.0; n * d],
                cell: vec![0; n],
            };
            for k in 0..n {
                let t = grid.t(k);
                let s = path.value(k);
                let aux = path.aux(k);
                model.local_covariance(t, s, aux, &mut r.cov[k * d * d..(k + 1) * d * d]);
                model.drift(t, s, aux, &mut r.mu[k * d..(k + 1) * d]);
                let s1 = path.value(k + 1);
                for i in 0..d {
                    r.ds[k * d + i] = s1[i] - s[i];
                }
                let ctx = StepContext::new(k, t, pi, f64::NAN, p.x0, path);
                budget.value(&ctx, model, horizon, &mut r.beta[k * d..(k + 1) * d]);
                if let CellMap::Binned(e) = cells {
                    r.cell[k] = e.bin_of_path(path, k) as u32;
                }
            }
            r
        });
        let mut f = Frame {
            n_paths: rows.len(),
            n_steps: n,
            d,
            cov: Vec::with_capacity(rows.len() * n * d * d),
            mu: Vec::with_capacity(rows.len() * n * d),
            ds: Vec::with_capacity(rows.len() * n * d),
            beta: Vec::with_capacity(rows.len() * n * d),
            cell: Vec::with_capacity(rows.len() * n),
            driftless: model.is_driftless(),
        };
        for r in rows {
            f.cov.extend(r.cov);
            f.mu.extend(r.mu);
            f.ds.extend(r.ds);
            f.beta.extend(r.beta);
            f.cell.extend(r.cell);
        }
        if f.beta.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(invalid("budget is not strictly positive on the ensemble"));
        }
        Ok(f)
    }
}

struct SweepOutcome {
    /// `n_steps x n_cells x d`.
    theta: Vec<f64>,
    mean_gain: f64,
    iterations: usize,
}

fn barrier_start(rule: StartRule, q: &DMatrix<f64>, beta: &[f64]) -> Option<Vec<f64>> {
    match rule {
        StartRule::BetaScaled => None,
        StartRule::Uniform => {
            let bs: f64 = beta.iter().sum();
            let qs: f64 = (0..beta.len()).map(|i| q[(i, i)]).sum();
            Some(vec![(bs / qs).sqrt(); beta.len()])
        }
    }
}

/// One forward sweep at a fixed `E[M_T] = m_bar`.
fn sweep(f: &Frame, n_cells: usize, m_bar: f64, opts: &SolveOptions) -> Result<SweepOutcome> {
    let (n, d) = (f.n_steps, f.d);
    let mut gain = vec![0.0; f.n_paths];
    let mut theta = vec![0.0; n * n_cells * d];
    let mut iterations = 0;
    let bopts = BarrierOptions { tol: opts.tol, max_iter: opts.max_iter };
    let mut count = vec![0usize; n_cells];
    let mut s_cov = vec![0.0; n_cells * d * d];
    let mut s_mu = vec![0.0; n_cells * d];
    let mut s_mum = vec![0.0; n_cells * d];
    let mut s_beta = vec![0.0; n_cells * d];
    for k in 0..n {
        count.iter_mut().for_each(|v| *v = 0);
        s_cov.iter_mut().for_each(|v| *v = 0.0);
        s_mu.iter_mut().for_each(|v| *v = 0.0);
        s_mum.iter_mut().for_each(|v| *v = 0.0);
        s_beta.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..f.n_paths {
            let row = p * n + k;
            let c = f.cell[row] as usize;
            count[c] += 1;
            for e in 0..d * d {
                s_cov[c * d * d + e] += f.cov[row * d * d + e];
            }
            for i in 0..d {
                let mu = f.mu[row * d + i];
                s_mu[c * d + i] += mu;
                s_mum[c * d + i] += 2.0 * mu * gain[p];
                s_beta[c * d + i] += f.beta[row * d + i];
            }
        }
        let mut solved = vec![false; n_cells];
        for c in 0..n_cells {
            if count[c] == 0 {
                continue;
            }
            let w = 1.0 / count[c] as f64;
            let q = DMatrix::from_fn(d, d, |i, j| s_cov[c * d * d + i * d + j] * w);
            let h: Vec<f64> = (0..d).map(|i| (s_mum[c * d + i] - s_mu[c * d + i] * m_bar) * w).collect();
            let beta: Vec<f64> = (0..d).map(|i| s_beta[c * d + i] * w).collect();
            let start = barrier_start(opts.start, &q, &beta);
            let sol = solve_barrier(&q, &h, &beta, start.as_deref(), bopts)?;
            iterations += sol.iterations;
            theta[(k * n_cells + c) * d..(k * n_cells + c + 1) * d].copy_from_slice(&sol.x);
            solved[c] = true;
        }
        fill_empty_cells(&mut theta[k * n_cells * d..(k + 1) * n_cells * d], &solved, d);
        for p in 0..f.n_paths {
            let row = p * n + k;
            let c = f.cell[row] as usize;
            let th = &theta[(k * n_cells + c) * d..(k * n_cells + c + 1) * d];
            for i in 0..d {
                gain[p] += th[i] * f.ds[row * d + i];
            }
        }
    }
    let mean_gain = gain.iter().sum::<f64>() / f.n_paths as f64;
    Ok(SweepOutcome { theta, mean_gain, iterations })
}

/// Copies the nearest solved cell into unsolved ones.
fn fill_empty_cells(theta: &mut [f64], solved: &[bool], d: usize) {
    let n = solved.len();
    for c in 0..n {
        if solved[c] {
            continue;
        }
        let nearest = (1..n).find_map(|off| {
            if c >= off && solved[c - off] {
                Some(c - off)
            } else if c + off < n && solved[c + off] {
                Some(c + off)
            } else {
                None
            }
        });
        if let Some(src) = nearest {
            let v: Vec<f64> = theta[src * d..(src + 1) * d].to_vec();
            theta[c * d..(c + 1) * d].copy_from_slice(&v);
        }
    }
}

/// Secant iteration on `g(m) = F(m) - m`; returns the fixed point, its value
/// of `F`, and the number of evaluations.
fn secant_fixed_point<T>(
    mut eval: impl FnMut(f64) -> Result<(f64, T)>,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, T, usize)> {
    let (f0, out0) = eval(0.0)?;
    let mut evals = 1;
    let scale = |m: f64| tol * (1.0 + m.abs());
    if f0.abs() <= scale(0.0) {
        return Ok((0.0, out0, evals));
    }
    let (mut m_prev, mut g_prev) = (0.0, f0);
    let mut m = f0;
    loop {
        let (fm, out) = eval(m)?;
        evals += 1;
        let g = fm - m;
        if g.abs() <= scale(m) {
            return Ok((m, out, evals));
        }
        if evals >= max_iter {
            return Err(Error::Convergence { iterations: evals, residual: g.abs() });
        }
        let denom = g - g_prev;
        let next = if denom != 0.0 { m - g * (m - m_prev) / denom } else { fm };
        m_prev = m;
        g_prev = g;
        m = next;
    }
}

fn build_time_local_policy(class: &InformationClass, cells: &CellMap, theta: Vec<f64>, d: usize, n_steps: usize) -> Result<PolicyRef> {
    Ok(match (class, cells) {
        (InformationClass::Deterministic, _) => Arc::new(DeterministicPolicy::new(d, theta)?),
        (InformationClass::Feedback(_), CellMap::Binned(e)) => {
            debug_assert_eq!(theta.len(), n_steps * e.n_bins() * d);
            Arc::new(BinnedPolicy { table: BinnedTable::new(e.clone(), d, theta)? })
        }
        _ => return Err(invalid("not a time-local class")),
    })
}

fn solve_time_local(p: &BudgetProblem, model: &dyn MarketModel) -> Result<(PolicyRef, f64, usize)> {
    let cells = CellMap::for_class(&p.class, p.src)?;
    let frame = Frame::build(p, model, &cells)?;
    let nc = cells.n_cells();
    let (m, out, evals) = if frame.driftless {
        let o = sweep(&frame, nc, 0.0, &p.opts)?;
        (o.mean_gain, o, 1)
    } else {
        secant_fixed_point(
            |m| {
                let o = sweep(&frame, nc, m, &p.opts)?;
                Ok((o.mean_gain, o))
            },
            p.opts.mean_tol,
            p.opts.max_iter,
        )?
    };
    let policy = build_time_local_policy(&p.class, &cells, out.theta, frame.d, frame.n_steps)?;
    Ok((policy, m, evals + out.iterations))
}

/// Constant class: `θ ⊙ (A θ) = β̄` with
/// `A = (1/T) E ∫ [2 μ (S - S_0)ᵀ + Σ - μ E(S_T - S_0)ᵀ] dt` and `β̄ = E ∫ β dt / T`.
fn solve_constant(p: &BudgetProblem, model: &dyn MarketModel) -> Result<(PolicyRef, f64, usize)> {
    let grid = p.src.grid();
    let (n, d, dt, horizon) = (grid.n_steps(), p.src.n_assets(), grid.dt(), grid.horizon());
    let budget = p.budget.as_ref();
    // per path: [R (d*d), Q (d*d), m (d), A (d), ∫β (d)]
    let len = 2 * d * d + 3 * d;
    let rows = par_map_paths(p.src, |pi, path| {
        let mut z = vec![0.0; len];
        let mut mu = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        let mut beta = vec![0.0; d];
        let s0 = path.value(0);
        for k in 0..n {
            let t = grid.t(k);
            let s = path.value(k);
            model.drift(t, s, path.aux(k), &mut mu);
            model.local_covariance(t, s, path.aux(k), &mut cov);
            let ctx = StepContext::new(k, t, pi, f64::NAN, p.x0, path);
            budget.value(&ctx, model, horizon, &mut beta);
            for i in 0..d {
                for j in 0..d {
                    z[i * d + j] += mu[i] * (s[j] - s0[j]) * dt;
                    z[d * d + i * d + j] += cov[i * d + j] * dt;
                }
                z[2 * d * d + i] += mu[i] * dt;
                z[2 * d * d + 2 * d + i] += beta[i] * dt;
            }
        }
        let st = path.value(n);
        for i in 0..d {
            z[2 * d * d + d + i] = st[i] - s0[i];
        }
        z
    });
    let np = rows.len() as f64;
    let mut avg = vec![0.0; len];
    for r in &rows {
        for e in 0..len {
            avg[e] += r[e];
        }
    }
    avg.iter_mut().for_each(|v| *v /= np);
    let a = DMatrix::from_fn(d, d, |i, j| {
        (2.0 * avg[i * d + j] + avg[d * d + i * d + j] - avg[2 * d * d + i] * avg[2 * d * d + d + j]) / horizon
    });
    let beta: Vec<f64> = (0..d).map(|i| avg[2 * d * d + 2 * d + i] / horizon).collect();
    check_positive(&beta)?;
    let start = barrier_start(p.opts.start, &a, &beta);
    let sol = solve_barrier(&a, &vec![0.0; d], &beta, start.as_deref(), BarrierOptions { tol: p.opts.tol, max_iter: p.opts.max_iter })?;
    let m: f64 = (0..d).map(|i| sol.x[i] * avg[2 * d * d + d + i]).sum();
    Ok((Arc::new(ConstantPolicy::new(sol.x)), m, sol.iterations))
}

/// Solves `u ⊙ (Σ u + 2 μ M - μ m̄) = β` at every (path, step) on the fly.
#[derive(Clone)]
pub struct FullInfoPolicy {
    model: Arc<dyn MarketModel>,
    budget: BudgetRef,
    horizon: f64,
    mean_gain: f64,
    opts: BarrierOptions,
}

impl fmt::Debug for FullInfoPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FullInfoPolicy").field("budget", &self.budget.name()).field("mean_gain", &self.mean_gain).finish()
    }
}

impl FullInfoPolicy {
    pub fn new(model: Arc<dyn MarketModel>, budget: BudgetRef, horizon: f64, mean_gain: f64) -> Self {
        Self { model, budget, horizon, mean_gain, opts: BarrierOptions::default() }
    }

    pub fn mean_gain(&self) -> f64 {
        self.mean_gain
    }

    /// Pointwise solve; assets with vanishing local variance get zero shares.
    pub fn solve_at(&self, ctx: &StepContext, out: &mut [f64]) -> Result<usize> {
        let d = out.len();
        let h = ctx.history();
        let (s, aux) = (h.current_value(), h.current_aux());
        let mut cov = vec![0.0; d * d];
        let mut mu = vec![0.0; d];
        let mut beta = vec![0.0; d];
        self.model.local_covariance(ctx.t, s, aux, &mut cov);
        self.model.drift(ctx.t, s, aux, &mut mu);
        self.budget.value(ctx, self.model.as_ref(), self.horizon, &mut beta);
        let live: Vec<usize> = (0..d).filter(|&i| cov[i * d + i] > 0.0).collect();
        out.iter_mut().for_each(|v| *v = 0.0);
        if live.is_empty() {
            return Ok(0);
        }
        let gain = ctx.wealth - ctx.x0;
        let q = DMatrix::from_fn(live.len(), live.len(), |a, b| cov[live[a] * d + live[b]]);
        let hh: Vec<f64> = live
            .iter()
            .map(|&i| if mu[i] == 0.0 { 0.0 } else { mu[i] * (2.0 * gain - self.mean_gain) })
            .collect();
        let bb: Vec<f64> = live.iter().map(|&i| beta[i]).collect();
        let sol = solve_barrier(&q, &hh, &bb, None, self.opts)?;
        for (a, &i) in live.iter().enumerate() {
            out[i] = sol.x[a];
        }
        Ok(sol.iterations)
    }
}

impl Policy for FullInfoPolicy {
    fn name(&self) -> String {
        format!("full_info({})", self.budget.name())
    }
    fn n_assets(&self) -> usize {
        self.budget.n_assets()
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        if self.solve_at(ctx, out).is_err() {
            out.iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
}

fn solve_full(p: &BudgetProblem, model: Arc<dyn MarketModel>) -> Result<(PolicyRef, f64, usize)> {
    let horizon = p.src.grid().horizon();
    let make = |m: f64| FullInfoPolicy {
        opts: BarrierOptions { tol: p.opts.tol, max_iter: p.opts.max_iter },
        ..FullInfoPolicy::new(model.clone(), p.budget.clone(), horizon, m)
    };
    if model.is_driftless() {
        return Ok((Arc::new(make(0.0)), 0.0, 1));
    }
    let (m, pol, evals) = secant_fixed_point(
        |m| {
            let pol = make(m);
            let mean = investment_value(&pol, p.src, p.x0)?.terminal_mean.mean - p.x0;
            Ok((mean, pol))
        },
        p.opts.mean_tol,
        p.opts.max_iter,
    )?;
    Ok((Arc::new(pol), m, evals))
}

fn check_non_degenerate(model: &dyn MarketModel, src: &dyn PathSource) -> Result<()> {
    let d = src.n_assets();
    let mut buf = src.new_buffer();
    src.load_path(0, &mut buf);
    let mut cov = vec![0.0; d * d];
    model.local_covariance(0.0, buf.value(0), buf.aux(0), &mut cov);
    let m = DMatrix::from_row_slice(d, d, &cov);
    if m.cholesky().is_none() {
        return Err(Error::DegenerateMarket("local covariance is singular at the initial state".into()));
    }
    Ok(())
}

fn finish(
    p: &BudgetProblem,
    policy: PolicyRef,
    mean_gain: f64,
    iterations: usize,
    gamma: Option<f64>,
) -> Result<BudgetSolution> {
    let inv = investment_value(policy.as_ref(), p.src, p.x0)?;
    let var = inv.terminal_variance;
    // residual at the mean the policy was solved for
    let cp = ContributionProcess::with_mean(policy.clone(), p.src, p.x0, mean_gain)?;
    let residual = budget_residual(&cp, p.budget.as_ref(), &p.class)?;
    // the market passed the non-degeneracy check, so a vanishing variance
    // means the cell solves failed and left the policy at zero
    if var.mean <= 3.0 * var.stderr {
        return Err(Error::Convergence { iterations, residual: residual.max });
    }
    let log_term = log_barrier_term(policy.as_ref(), p.budget.as_ref(), p.src, p.x0)?;
    let scale = beta_scale(p.budget.as_ref(), p.src, p.x0)?;
    let tol = match p.class {
        InformationClass::Full => 1e-10,
        _ => 1e-6,
    };
    Ok(BudgetSolution {
        converged: residual.max <= tol * scale.max(1e-300),
        policy,
        class: p.class,
        residual,
        objective: log_term + 0.5 * var.mean,
        terminal_variance: var,
        mean_gain,
        iterations,
        gamma,
        cap_hits: inv.cap_hits,
    })
}

/// Pointwise solver for driftless models under full information.
pub fn solve_budget_pointwise(p: &BudgetProblem) -> Result<BudgetSolution> {
    let model = p.validate()?;
    if !model.is_driftless() {
        return Err(invalid("the pointwise solver requires a driftless model"));
    }
    check_non_degenerate(model.as_ref(), p.src)?;
    let full = BudgetProblem { class: InformationClass::Full, ..p.clone() };
    let (policy, m, it) = solve_full(&full, model)?;
    finish(&full, policy, m, it, None)
}

/// Class-restricted solver; `E[M_T]` coupling resolved by secant iteration.
pub fn solve_budget_iterative(p: &BudgetProblem) -> Result<BudgetSolution> {
    let model = p.validate()?;
    if !p.budget.class().is_coarser_or_equal(&InformationClass::Full) {
        return Err(invalid("unsupported budget class"));
    }
    check_non_degenerate(model.as_ref(), p.src)?;
    let (policy, m, it) = match p.class {
        InformationClass::Constant => solve_constant(p, model.as_ref())?,
        InformationClass::Full => solve_full(p, model)?,
        _ => solve_time_local(p, model.as_ref())?,
    };
    finish(p, policy, m, it, None)
}

/// Fixed-point search on `γ`: the inner problem uses the marginal
/// `2 μ M + Σ u + (γ/2) μ` and the update is `γ ← (1-ω) γ - 2 ω E[M_T]`.
pub fn embedding_search(p: &BudgetProblem) -> Result<BudgetSolution> {
    let model = p.validate()?;
    check_non_degenerate(model.as_ref(), p.src)?;
    let omega = p.opts.damping;
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(invalid("damping must lie in (0, 1]"));
    }
    let horizon = p.src.grid().horizon();
    let bopts = BarrierOptions { tol: p.opts.tol, max_iter: p.opts.max_iter };
    // inner solve at fixed γ returns (policy, E[M_T], inner iterations)
    let inner: Box<dyn Fn(f64) -> Result<(PolicyRef, f64, usize)>> = match p.class {
        InformationClass::Constant => {
            // a constant policy has no time-local structure; reuse the sweep on a
            // single cell spanning all steps is not possible, so iterate directly
            return embedding_constant(p, model.as_ref());
        }
        InformationClass::Full => Box::new(move |gamma: f64| {
            let pol = FullInfoPolicy { opts: bopts, ..FullInfoPolicy::new(model.clone(), p.budget.clone(), horizon, -0.5 * gamma) };
            let m = investment_value(&pol, p.src, p.x0)?.terminal_mean.mean - p.x0;
            Ok((Arc::new(pol) as PolicyRef, m, 1))
        }),
        _ => {
            let cells = CellMap::for_class(&p.class, p.src)?;
            let frame = Frame::build(p, model.as_ref(), &cells)?;
            let class = p.class;
            let opts = p.opts;
            Box::new(move |gamma: f64| {
                let o = sweep(&frame, cells.n_cells(), -0.5 * gamma, &opts)?;
                let pol = build_time_local_policy(&class, &cells, o.theta, frame.d, frame.n_steps)?;
                Ok((pol, o.mean_gain, o.iterations))
            })
        }
    };
    let mut gamma = 0.0;
    let mut total = 0;
    for _ in 0..p.opts.gamma_max_iter {
        let (pol, m, n) = inner(gamma)?;
        total += n;
        let next = (1.0 - omega) * gamma + omega * (-2.0 * m);
        if (next - gamma).abs() <= p.opts.gamma_tol {
            // the returned policy is the one solved at the accepted γ
            let (pol, _, n) = if next == gamma { (pol, m, 0) } else { inner(next)? };
            return finish(p, pol, -0.5 * next, total + n, Some(next));
        }
        gamma = next;
    }
    Err(Error::Convergence { iterations: p.opts.gamma_max_iter, residual: f64::NAN })
}

fn embedding_constant(p: &BudgetProblem, model: &dyn MarketModel) -> Result<BudgetSolution> {
    // The constant-class system has E[M_T] = θᵀ E(S_T - S_0) built in, so γ*
    // follows from the direct solution.
    let (pol, m, it) = solve_constant(p, model)?;
    finish(p, pol, m, it, Some(-2.0 * m))
}

/// Class-averaged `u ⊙ c - β` over (step, cell, asset); pointwise for the
/// full class. Weighted by path count and `dt`.
pub fn budget_residual(cp: &ContributionProcess, budget: &dyn Budget, class: &InformationClass) -> Result<Residual> {
    let src = cp.source();
    let grid = src.grid();
    let (n, d, dt, horizon) = (grid.n_steps(), src.n_assets(), grid.dt(), grid.horizon());
    if budget.n_assets() != d {
        return Err(invalid("budget and policy dimensions differ"));
    }
    let model = cp.model().clone();
    let walker = cp.walker();
    if let InformationClass::Full = class {
        let rows = par_map_paths(src, |pi, path| {
            let mut beta = vec![0.0; d];
            let (mut mx, mut sq) = (0.0f64, 0.0);
            walker.walk(pi, path, |s| {
                let ctx = StepContext::new(s.step, s.t, pi, f64::NAN, cp.x0(), path);
                budget.value(&ctx, model.as_ref(), horizon, &mut beta);
                for i in 0..d {
                    let r = s.u[i] * s.c[i] - beta[i];
                    mx = mx.max(r.abs());
                    sq += r * r;
                }
            });
            (mx, sq)
        });
        let mx = rows.iter().fold(0.0f64, |a, r| a.max(r.0));
        let sq: f64 = rows.iter().map(|r| r.1).sum();
        return Ok(Residual { max: mx, l2: (sq / (rows.len() * n * d) as f64).sqrt() });
    }
    let cells = CellMap::for_class(class, src)?;
    let nc = cells.n_cells();
    let cells_per_step = if let InformationClass::Constant = class { 0 } else { 1 };
    let slots = if cells_per_step == 0 { 1 } else { n * nc };
    // per slot: [Σ uc dt (d), Σ β dt (d), count]
    let width = 2 * d + 1;
    let rows = par_map_paths(src, |pi, path| {
        let mut acc = vec![0.0; slots * width];
        let mut beta = vec![0.0; d];
        walker.walk(pi, path, |s| {
            let ctx = StepContext::new(s.step, s.t, pi, f64::NAN, cp.x0(), path);
            budget.value(&ctx, model.as_ref(), horizon, &mut beta);
            let slot = match (&cells, cells_per_step) {
                (_, 0) => 0,
                (CellMap::Binned(e), _) => s.step * nc + e.bin_of_path(path, s.step),
                (CellMap::Single, _) => s.step,
            };
            let o = slot * width;
            for i in 0..d {
                acc[o + i] += s.u[i] * s.c[i] * dt;
                acc[o + d + i] += beta[i] * dt;
            }
            acc[o + 2 * d] += dt;
        });
        acc
    });
    let mut tot = vec![0.0; slots * width];
    for r in rows {
        for (a, b) in tot.iter_mut().zip(r) {
            *a += b;
        }
    }
    let (mut mx, mut sq, mut w) = (0.0f64, 0.0, 0.0);
    for s in 0..slots {
        let o = s * width;
        let weight = tot[o + 2 * d];
        if weight == 0.0 {
            continue;
        }
        for i in 0..d {
            let r = (tot[o + i] - tot[o + d + i]) / weight;
            mx = mx.max(r.abs());
            sq += weight * r * r;
        }
        w += weight * d as f64;
    }
    Ok(Residual { max: mx, l2: (sq / w).sqrt() })
}

/// Largest budget value on the ensemble.
fn beta_scale(budget: &dyn Budget, src: &dyn PathSource, x0: f64) -> Result<f64> {
    let model = src.require_model()?;
    let grid = src.grid();
    let d = src.n_assets();
    let rows = par_map_paths(src, |pi, path| {
        let mut beta = vec![0.0; d];
        let mut m = 0.0f64;
        for k in 0..grid.n_steps() {
            let ctx = StepContext::new(k, grid.t(k), pi, f64::NAN, x0, path);
            budget.value(&ctx, model.as_ref(), grid.horizon(), &mut beta);
            m = beta.iter().fold(m, |a, b| a.max(*b));
        }
        m
    });
    Ok(rows.into_iter().fold(0.0, f64::max))
}

/// Per path `∫ Σ_i f(β_i, u_i) dt` along the policy's own wealth.
fn integrate_budget_terms(
    policy: &dyn Policy,
    budget: &dyn Budget,
    src: &dyn PathSource,
    x0: f64,
    f: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<Vec<f64>> {
    let model = src.require_model()?;
    if policy.n_assets() != src.n_assets() || budget.n_assets() != src.n_assets() {
        return Err(invalid("policy, budget and ensemble dimensions differ"));
    }
    let grid = src.grid();
    let (d, dt, horizon) = (src.n_assets(), grid.dt(), grid.horizon());
    let walker = Walker { policy, model: None, grid, x0, u_max: DEFAULT_U_MAX, m_bar: None };
    Ok(par_map_paths(src, |pi, path| {
        let mut beta = vec![0.0; d];
        let mut acc = 0.0;
        walker.walk(pi, path, |s| {
            let ctx = StepContext::new(s.step, s.t, pi, x0 + s.gain, x0, path);
            budget.value(&ctx, model.as_ref(), horizon, &mut beta);
            for i in 0..d {
                acc += f(beta[i], s.u[i]) * dt;
            }
        });
        acc
    }))
}

fn log_barrier_term(policy: &dyn Policy, budget: &dyn Budget, src: &dyn PathSource, x0: f64) -> Result<f64> {
    let v = integrate_budget_terms(policy, budget, src, x0, |b, u| -b * u.ln())?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// `E ∫ -Σ β log u dt + ½ Var(X_T)`.
pub fn objective(policy: &dyn Policy, budget: &dyn Budget, src: &dyn PathSource, x0: f64) -> Result<f64> {
    let var = investment_value(policy, src, x0)?.terminal_variance.mean;
    Ok(log_barrier_term(policy, budget, src, x0)? + 0.5 * var)
}

/// `E[∫ -Σ β log u dt + γ M_T + M_T²]`.
pub fn auxiliary_objective(policy: &dyn Policy, gamma: f64, src: &dyn PathSource, budget: &dyn Budget, x0: f64) -> Result<f64> {
    let logs = integrate_budget_terms(policy, budget, src, x0, |b, u| -b * u.ln())?;
    let term = investment_value(policy, src, x0)?.terminal;
    let n = logs.len() as f64;
    Ok(logs.iter().zip(&term).map(|(l, x)| {
        let m = x - x0;
        l + gamma * m + m * m
    }).sum::<f64>() / n)
}

/// `Σ_i E ∫ (-β_i log u_i + β_i log β_i) dt`.
pub fn kl_divergence(budget: &dyn Budget, policy: &dyn Policy, src: &dyn PathSource, x0: f64) -> Result<f64> {
    let v = integrate_budget_terms(policy, budget, src, x0, |b, u| b * (b.ln() - u.ln()))?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Conditional average of `β` over the cells of a coarser class under the
/// sample measure times `dt`.
pub fn project_budget(budget: &BudgetRef, to: &InformationClass, src: &dyn PathSource) -> Result<BudgetRef> {
    let from = budget.class();
    if !to.is_coarser_or_equal(&from) {
        return Err(invalid(format!("{to:?} is not coarser than {from:?}")));
    }
    if *to == from {
        return Ok(budget.clone());
    }
    let model = src.require_model()?;
    let grid = src.grid();
    let (n, d, horizon) = (grid.n_steps(), src.n_assets(), grid.horizon());
    let edges = match to {
        InformationClass::Feedback(b) => Some(Arc::new(BinEdges::estimate(*b, src))),
        _ => None,
    };
    let nc = edges.as_ref().map(|e| e.n_bins()).unwrap_or(1);
    let width = d + 1;
    let rows = par_map_paths(src, |pi, path| {
        let mut acc = vec![0.0; n * nc * width];
        let mut beta = vec![0.0; d];
        for k in 0..n {
            let ctx = StepContext::new(k, grid.t(k), pi, f64::NAN, 0.0, path);
            budget.value(&ctx, model.as_ref(), horizon, &mut beta);
            let c = edges.as_ref().map(|e| e.bin_of_path(path, k)).unwrap_or(0);
            let o = (k * nc + c) * width;
            for i in 0..d {
                acc[o + i] += beta[i];
            }
            acc[o + d] += 1.0;
        }
        acc
    });
    let mut tot = vec![0.0; n * nc * width];
    for r in rows {
        for (a, b) in tot.iter_mut().zip(r) {
            *a += b;
        }
    }
    match to {
        InformationClass::Constant => {
            let mut v = vec![0.0; d];
            let mut w = 0.0;
            for k in 0..n {
                for i in 0..d {
                    v[i] += tot[k * width + i];
                }
                w += tot[k * width + d];
            }
            Ok(Arc::new(ConstantBudget::new(v.iter().map(|x| x / w).collect())?))
        }
        InformationClass::Deterministic => {
            let mut table = vec![0.0; n * d];
            for k in 0..n {
                for i in 0..d {
                    table[k * d + i] = tot[k * width + i] / tot[k * width + d];
                }
            }
            Ok(Arc::new(DeterministicBudget::new(d, table)?))
        }
        InformationClass::Feedback(_) => {
            let mut table = vec![0.0; n * nc * d];
            let mut solved = vec![false; nc];
            for k in 0..n {
                for c in 0..nc {
                    let o = (k * nc + c) * width;
                    solved[c] = tot[o + d] > 0.0;
                    if solved[c] {
                        for i in 0..d {
                            table[(k * nc + c) * d + i] = tot[o + i] / tot[o + d];
                        }
                    }
                }
                fill_empty_cells(&mut table[k * nc * d..(k + 1) * nc * d], &solved, d);
            }
            let e = edges.expect("feedback edges");
            Ok(Arc::new(BinnedBudget::new(BinnedTable::new(e, d, table)?)?))
        }
        InformationClass::Full => unreachable!("handled by the identity case"),
    }
}
