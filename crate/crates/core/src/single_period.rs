//! Single-period risk measures, contributions and allocation solvers on a
//! price covariance matrix.
//!
//! Marginal contributions for the variance use `Λw` (half the gradient of
//! `wᵀΛw`), so variance contributions sum to `wᵀΛw`. The budgeting objective
//! is `-Σβ log x + xᵀΛx`, whose first-order condition is `x ⊙ (Λx) = β/2`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{solve_barrier, BarrierOptions};
use crate::error::{invalid, Error, Result};
use crate::registry::{field, Registry};

#[derive(Debug, Clone, PartialEq)]
pub struct SinglePeriodMarket {
    cov: DMatrix<f64>,
}

impl SinglePeriodMarket {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        if d == 0 || cov.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "covariance must be square and non-empty, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(invalid("covariance has non-finite entries"));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                    return Err(Error::NotPositiveDefinite(format!(
                        "not symmetric at ({i},{j}): {} vs {}",
                        cov[(i, j)],
                        cov[(j, i)]
                    )));
                }
            }
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Cholesky factorisation failed".into()));
        }
        Ok(Self { cov })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("covariance rows have unequal length".into()));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn lambda_w(&self, w: &[f64]) -> Vec<f64> {
        (&self.cov * DVector::from_column_slice(w)).iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMeasure {
    Std,
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights(pub Vec<f64>);

impl Weights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(invalid("weights must be finite"));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetVector(Vec<f64>);

impl BudgetVector {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(invalid("budget entries must be finite and strictly positive"));
        }
        Ok(Self(beta))
    }

    pub fn equal(d: usize) -> Self {
        Self(vec![1.0 / d as f64; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|b| a * b).collect())
    }
}

fn check_dim(market: &SinglePeriodMarket, n: usize) -> Result<()> {
    if market.dim() != n {
        return Err(Error::ShapeMismatch(format!(
            "market has {} assets, vector has {n}",
            market.dim()
        )));
    }
    Ok(())
}

fn variance(market: &SinglePeriodMarket, w: &[f64]) -> f64 {
    let lw = market.lambda_w(w);
    w.iter().zip(&lw).map(|(a, b)| a * b).sum::<f64>().max(0.0)
}

/// `sqrt(wᵀΛw)`.
pub fn std_risk(market: &SinglePeriodMarket, w: &[f64]) -> f64 {
    variance(market, w).sqrt()
}

pub fn marginal_contribution_sp(
    market: &SinglePeriodMarket,
    w: &[f64],
    measure: RiskMeasure,
) -> Result<Vec<f64>> {
    check_dim(market, w.len())?;
    let lw = market.lambda_w(w);
    match measure {
        RiskMeasure::Variance => Ok(lw),
        RiskMeasure::Std => {
            let s = std_risk(market, w);
            if s == 0.0 {
                return Err(Error::DivisionByZero("std marginal contribution at zero risk".into()));
            }
            Ok(lw.into_iter().map(|v| v / s).collect())
        }
    }
}

pub fn risk_contribution_sp(
    market: &SinglePeriodMarket,
    w: &[f64],
    measure: RiskMeasure,
) -> Result<Vec<f64>> {
    let c = marginal_contribution_sp(market, w, measure)?;
    Ok(w.iter().zip(c).map(|(a, b)| a * b).collect())
}

/// `|Σ k_i - ρ(w)|` for the chosen measure.
pub fn euler_residual(market: &SinglePeriodMarket, w: &[f64], measure: RiskMeasure) -> Result<f64> {
    let k = risk_contribution_sp(market, w, measure)?;
    let total: f64 = k.iter().sum();
    let rho = match measure {
        RiskMeasure::Std => std_risk(market, w),
        RiskMeasure::Variance => variance(market, w),
    };
    Ok((total - rho).abs())
}

/// `Λ⁻¹𝟙 / (𝟙ᵀΛ⁻¹𝟙)`.
pub fn min_variance_weights(market: &SinglePeriodMarket) -> Weights {
    let d = market.dim();
    let chol = market.cov.clone().cholesky().expect("validated SPD");
    let z = chol.solve(&DVector::from_element(d, 1.0));
    let s: f64 = z.iter().sum();
    Weights(z.iter().map(|v| v / s).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskBudgetSolution {
    /// Minimiser of `-Σβ log x + xᵀΛx`.
    pub raw: Vec<f64>,
    /// `raw / Σ raw`.
    pub weights: Weights,
    pub iterations: usize,
    /// `max_i |x_i (Λx)_i - β_i / 2|`.
    pub residual: f64,
}

pub fn risk_budget_weights(
    market: &SinglePeriodMarket,
    budget: &BudgetVector,
    opts: BarrierOptions,
) -> Result<RiskBudgetSolution> {
    risk_budget_weights_from(market, budget, None, opts)
}

/// As [`risk_budget_weights`] with an explicit positive starting point.
pub fn risk_budget_weights_from(
    market: &SinglePeriodMarket,
    budget: &BudgetVector,
    start: Option<&[f64]>,
    opts: BarrierOptions,
) -> Result<RiskBudgetSolution> {
    let d = market.dim();
    check_dim(market, budget.as_slice().len())?;
    let q = &market.cov * 2.0;
    // start at sqrt(β_i / Q_ii), exact when Λ is diagonal
    let sol = solve_barrier(&q, &vec![0.0; d], budget.as_slice(), start, opts)?;
    let s: f64 = sol.x.iter().sum();
    let lx = market.lambda_w(&sol.x);
    let residual = (0..d)
        .map(|i| (sol.x[i] * lx[i] - budget.as_slice()[i] / 2.0).abs())
        .fold(0.0, f64::max);
    Ok(RiskBudgetSolution {
        weights: Weights(sol.x.iter().map(|v| v / s).collect()),
        raw: sol.x,
        iterations: sol.iterations,
        residual,
    })
}

/// `Σ_{i,j} (k_i/β_i - k_j/β_j)^2` with `k` the std risk contributions.
pub fn heuristic_loss(market: &SinglePeriodMarket, w: &[f64], budget: &BudgetVector) -> Result<f64> {
    check_dim(market, budget.as_slice().len())?;
    let k = risk_contribution_sp(market, w, RiskMeasure::Std)?;
    let r: Vec<f64> = k.iter().zip(budget.as_slice()).map(|(k, b)| k / b).collect();
    let mut loss = 0.0;
    for a in &r {
        for b in &r {
            loss += (a - b).powi(2);
        }
    }
    Ok(loss)
}

/// A single-period allocation rule selectable by name.
pub trait AllocationStrategy: Send + Sync {
    fn name(&self) -> &str;
    fn allocate(&self, market: &SinglePeriodMarket) -> Result<Weights>;
}

pub struct EqualWeight;
pub struct MinVariance;
pub struct RiskParity;
pub struct RiskBudgeting {
    pub budget: BudgetVector,
}

impl AllocationStrategy for EqualWeight {
    fn name(&self) -> &str {
        "ew"
    }
    fn allocate(&self, market: &SinglePeriodMarket) -> Result<Weights> {
        let d = market.dim();
        Ok(Weights(vec![1.0 / d as f64; d]))
    }
}

impl AllocationStrategy for MinVariance {
    fn name(&self) -> &str {
        "mv"
    }
    fn allocate(&self, market: &SinglePeriodMarket) -> Result<Weights> {
        Ok(min_variance_weights(market))
    }
}

impl AllocationStrategy for RiskParity {
    fn name(&self) -> &str {
        "rp"
    }
    fn allocate(&self, market: &SinglePeriodMarket) -> Result<Weights> {
        let b = BudgetVector::equal(market.dim());
        Ok(risk_budget_weights(market, &b, BarrierOptions::default())?.weights)
    }
}

impl AllocationStrategy for RiskBudgeting {
    fn name(&self) -> &str {
        "budget"
    }
    fn allocate(&self, market: &SinglePeriodMarket) -> Result<Weights> {
        Ok(risk_budget_weights(market, &self.budget, BarrierOptions::default())?.weights)
    }
}

pub type StrategyBox = Box<dyn AllocationStrategy>;

/// Registered strategies: `ew`, `mv`, `rp`, `budget` (needs `{"budget": [...]}`).
pub fn allocation_registry() -> &'static Registry<StrategyBox> {
    static REG: OnceLock<Registry<StrategyBox>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<StrategyBox> = Registry::new("allocation strategy");
        r.register("ew", |_| Ok(Box::new(EqualWeight)));
        r.register("mv", |_| Ok(Box::new(MinVariance)));
        r.register("rp", |_| Ok(Box::new(RiskParity)));
        r.register("budget", |p| {
            Ok(Box::new(RiskBudgeting { budget: BudgetVector::new(field(p, "budget")?)? }))
        });
        r
    })
}
