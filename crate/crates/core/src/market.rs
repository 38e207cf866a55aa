//! Diffusion models and their simulators.

use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ensemble::{LazyEnsemble, PathEnsemble};
use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::registry::{field, Registry};

/// An Itô model for traded asset values driven by `n_drivers` Brownian motions.
///
/// `drift` and `local_covariance` give the coefficients of `dS = μ dt + dN`
/// with `d⟨S⟩ = Σ dt`; both are evaluated at the left end of a step.
pub trait MarketModel: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn n_assets(&self) -> usize;
    fn n_drivers(&self) -> usize;
    /// Names of auxiliary state tracks (e.g. stochastic volatility).
    fn aux_names(&self) -> Vec<&'static str> {
        Vec::new()
    }
    fn n_aux(&self) -> usize {
        self.aux_names().len()
    }
    fn initial_state(&self, values: &mut [f64], aux: &mut [f64]);
    /// Advances from `t` to `t_next` with Brownian increments `db`.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        t: f64,
        t_next: f64,
        s: &[f64],
        aux: &[f64],
        db: &[f64],
        s_next: &mut [f64],
        aux_next: &mut [f64],
    );
    fn drift(&self, t: f64, s: &[f64], aux: &[f64], out: &mut [f64]);
    /// Row-major `d x d`.
    fn local_covariance(&self, t: f64, s: &[f64], aux: &[f64], out: &mut [f64]);
    /// Relative volatility `sqrt(Σ_ii) / S_i` (zero where `S_i = 0`).
    fn volatility(&self, t: f64, s: &[f64], aux: &[f64], out: &mut [f64]) {
        let d = self.n_assets();
        let mut cov = vec![0.0; d * d];
        self.local_covariance(t, s, aux, &mut cov);
        for i in 0..d {
            out[i] = if s[i] != 0.0 { cov[i * d + i].max(0.0).sqrt() / s[i].abs() } else { 0.0 };
        }
    }
    fn is_driftless(&self) -> bool;
    fn params_json(&self) -> Value;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub s0: Vec<f64>,
    pub drift: Vec<f64>,
    /// `d x m`, rows per asset.
    pub sigma: Vec<Vec<f64>>,
}

impl GbmParams {
    pub fn scalar(s0: f64, drift: f64, sigma: f64) -> Self {
        Self { s0: vec![s0], drift: vec![drift], sigma: vec![vec![sigma]] }
    }

    /// Independent assets with diagonal diffusion.
    pub fn independent(s0: &[f64], drift: &[f64], vols: &[f64]) -> Self {
        let d = vols.len();
        let sigma = (0..d)
            .map(|i| (0..d).map(|j| if i == j { vols[i] } else { 0.0 }).collect())
            .collect();
        Self { s0: s0.to_vec(), drift: drift.to_vec(), sigma }
    }

    pub fn n_assets(&self) -> usize {
        self.s0.len()
    }

    pub fn n_drivers(&self) -> usize {
        self.sigma.first().map_or(0, Vec::len)
    }

    /// `σσᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.n_assets();
        let m = self.n_drivers();
        DMatrix::from_fn(d, d, |i, j| (0..m).map(|k| self.sigma[i][k] * self.sigma[j][k]).sum())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.s0.len();
        if d == 0 {
            return Err(invalid("gbm needs at least one asset"));
        }
        if self.drift.len() != d || self.sigma.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "gbm: s0 has {d} entries, drift {}, sigma rows {}",
                self.drift.len(),
                self.sigma.len()
            )));
        }
        let m = self.n_drivers();
        if m == 0 || self.sigma.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch("gbm: sigma rows must share a positive length".into()));
        }
        if self.s0.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("gbm: initial prices must be positive"));
        }
        if self.drift.iter().chain(self.sigma.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(invalid("gbm: coefficients must be finite"));
        }
        Ok(())
    }

    /// Whether `σσᵀ` is strictly positive definite.
    pub fn is_non_degenerate(&self) -> bool {
        self.covariance().cholesky().is_some()
    }
}

/// Geometric Brownian motion `dS = Diag(S)(b dt + σ dW)`.
#[derive(Debug, Clone)]
pub struct Gbm {
    params: GbmParams,
    cov: Vec<f64>,
}

impl Gbm {
    pub fn new(params: GbmParams) -> Result<Self> {
        params.validate()?;
        let c = params.covariance();
        let d = params.n_assets();
        let cov = (0..d * d).map(|k| c[(k / d, k % d)]).collect();
        Ok(Self { params, cov })
    }

    pub fn params(&self) -> &GbmParams {
        &self.params
    }
}

impl MarketModel for Gbm {
    fn name(&self) -> &str {
        "gbm"
    }
    fn n_assets(&self) -> usize {
        self.params.n_assets()
    }
    fn n_drivers(&self) -> usize {
        self.params.n_drivers()
    }
    fn initial_state(&self, values: &mut [f64], _aux: &mut [f64]) {
        values.copy_from_slice(&self.params.s0);
    }
    fn step(&self, t: f64, t_next: f64, s: &[f64], _: &[f64], db: &[f64], s_next: &mut [f64], _: &mut [f64]) {
        let dt = t_next - t;
        let d = self.n_assets();
        for i in 0..d {
            let row = &self.params.sigma[i];
            let shock: f64 = row.iter().zip(db).map(|(a, b)| a * b).sum();
            let mu = self.params.drift[i] - 0.5 * self.cov[i * d + i];
            s_next[i] = s[i] * (mu * dt + shock).exp();
        }
    }
    fn drift(&self, _: f64, s: &[f64], _: &[f64], out: &mut [f64]) {
        for i in 0..s.len() {
            out[i] = self.params.drift[i] * s[i];
        }
    }
    fn local_covariance(&self, _: f64, s: &[f64], _: &[f64], out: &mut [f64]) {
        let d = s.len();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = s[i] * self.cov[i * d + j] * s[j];
            }
        }
    }
    fn volatility(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        let d = self.n_assets();
        for i in 0..d {
            out[i] = self.cov[i * d + i].sqrt();
        }
    }
    fn is_driftless(&self) -> bool {
        self.params.drift.iter().all(|b| *b == 0.0)
    }
    fn params_json(&self) -> Value {
        serde_json::to_value(&self.params).unwrap_or(Value::Null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SabrParams {
    pub f0: f64,
    /// Initial volatility.
    pub s: f64,
    pub alpha: f64,
    #[serde(alias = "beta_exp")]
    pub beta: f64,
    pub rho: f64,
}

impl SabrParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f0.is_finite() && self.f0 > 0.0) {
            return Err(invalid("sabr: f0 must be positive"));
        }
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(invalid("sabr: initial volatility must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(invalid("sabr: alpha must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("sabr: beta must lie in [0, 1]"));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(invalid("sabr: rho must lie in (-1, 1)"));
        }
        Ok(())
    }
}

/// SABR forward with absorption at zero; the volatility is a stochastic
/// exponential stepped exactly. Drivers are `(B1, B2)`, aux track is `sigma`.
#[derive(Debug, Clone)]
pub struct Sabr {
    params: SabrParams,
}

impl Sabr {
    pub fn new(params: SabrParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &SabrParams {
        &self.params
    }

    #[inline]
    pub fn f_pow(&self, f: f64) -> f64 {
        if f <= 0.0 {
            0.0
        } else if self.params.beta == 1.0 {
            f
        } else if self.params.beta == 0.0 {
            1.0
        } else {
            f.powf(self.params.beta)
        }
    }
}

impl MarketModel for Sabr {
    fn name(&self) -> &str {
        "sabr"
    }
    fn n_assets(&self) -> usize {
        1
    }
    fn n_drivers(&self) -> usize {
        2
    }
    fn aux_names(&self) -> Vec<&'static str> {
        vec!["sigma"]
    }
    fn initial_state(&self, values: &mut [f64], aux: &mut [f64]) {
        values[0] = self.params.f0;
        aux[0] = self.params.s;
    }
    fn step(&self, t: f64, t_next: f64, s: &[f64], aux: &[f64], db: &[f64], s_next: &mut [f64], aux_next: &mut [f64]) {
        let dt = t_next - t;
        let p = &self.params;
        let dw2 = p.rho * db[0] + (1.0 - p.rho * p.rho).sqrt() * db[1];
        aux_next[0] = aux[0] * (-0.5 * p.alpha * p.alpha * dt + p.alpha * dw2).exp();
        let f = s[0];
        s_next[0] = if f <= 0.0 {
            0.0
        } else {
            let next = f + aux[0] * self.f_pow(f) * db[0];
            if next <= 0.0 {
                0.0
            } else {
                next
            }
        };
    }
    fn drift(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn local_covariance(&self, _: f64, s: &[f64], aux: &[f64], out: &mut [f64]) {
        let v = aux[0] * self.f_pow(s[0]);
        out[0] = v * v;
    }
    fn is_driftless(&self) -> bool {
        true
    }
    fn params_json(&self) -> Value {
        serde_json::to_value(self.params).unwrap_or(Value::Null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondParams {
    pub rate: f64,
    pub s0: f64,
}

impl BondParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0.is_finite() && self.s0 > 0.0) {
            return Err(invalid("bond: initial value must be positive"));
        }
        if !self.rate.is_finite() {
            return Err(invalid("bond: rate must be finite"));
        }
        Ok(())
    }
}

/// `s0 * exp(r t_k)` on every grid node.
pub fn bond_path(params: &BondParams, grid: &TimeGrid) -> Vec<f64> {
    grid.nodes().into_iter().map(|t| params.s0 * (params.rate * t).exp()).collect()
}

/// A riskless bond (asset 0) and one GBM stock (asset 1) on one driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondStock {
    pub bond: BondParams,
    pub stock_s0: f64,
    pub stock_drift: f64,
    pub stock_sigma: f64,
}

impl BondStock {
    pub fn new(bond: BondParams, stock_s0: f64, stock_drift: f64, stock_sigma: f64) -> Result<Self> {
        bond.validate()?;
        if !(stock_s0 > 0.0 && stock_drift.is_finite() && stock_sigma.is_finite()) {
            return Err(invalid("bond_stock: invalid stock parameters"));
        }
        Ok(Self { bond, stock_s0, stock_drift, stock_sigma })
    }
}

impl MarketModel for BondStock {
    fn name(&self) -> &str {
        "bond_stock"
    }
    fn n_assets(&self) -> usize {
        2
    }
    fn n_drivers(&self) -> usize {
        1
    }
    fn initial_state(&self, values: &mut [f64], _: &mut [f64]) {
        values[0] = self.bond.s0;
        values[1] = self.stock_s0;
    }
    fn step(&self, t: f64, t_next: f64, s: &[f64], _: &[f64], db: &[f64], s_next: &mut [f64], _: &mut [f64]) {
        let dt = t_next - t;
        s_next[0] = self.bond.s0 * (self.bond.rate * t_next).exp();
        let v = self.stock_sigma;
        s_next[1] = s[1] * ((self.stock_drift - 0.5 * v * v) * dt + v * db[0]).exp();
    }
    fn drift(&self, _: f64, s: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = self.bond.rate * s[0];
        out[1] = self.stock_drift * s[1];
    }
    fn local_covariance(&self, _: f64, s: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = self.stock_sigma * self.stock_sigma * s[1] * s[1];
    }
    fn is_driftless(&self) -> bool {
        self.bond.rate == 0.0 && self.stock_drift == 0.0
    }
    fn params_json(&self) -> Value {
        serde_json::to_value(self).unwrap_or(Value::Null)
    }
}

pub fn simulate_gbm(params: &GbmParams, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    let model: Arc<dyn MarketModel> = Arc::new(Gbm::new(params.clone())?);
    simulate(model, grid, n_paths, seed)
}

pub fn simulate_sabr(params: &SabrParams, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    let model: Arc<dyn MarketModel> = Arc::new(Sabr::new(*params)?);
    simulate(model, grid, n_paths, seed)
}

/// Materialises `n_paths` paths of any model.
pub fn simulate(model: Arc<dyn MarketModel>, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(invalid("need at least one path"));
    }
    Ok(PathEnsemble::from(&LazyEnsemble::new(model, *grid, n_paths, seed)))
}

/// Fraction of paths whose first asset ends at exactly zero.
pub fn absorbed_fraction(ensemble: &PathEnsemble) -> f64 {
    let n = ensemble.n_paths();
    let last = ensemble.grid().n_steps();
    let hits = (0..n).filter(|&p| ensemble.value(p, last, 0) == 0.0).count();
    hits as f64 / n as f64
}

pub type ModelBox = Arc<dyn MarketModel>;

/// Registered models: `gbm`, `sabr`, `bond_stock`.
pub fn model_registry() -> &'static Registry<ModelBox> {
    static REG: OnceLock<Registry<ModelBox>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<ModelBox> = Registry::new("market model");
        r.register("gbm", |p| {
            let params: GbmParams = serde_json::from_value(p.clone())
                .map_err(|e| invalid(format!("gbm parameters: {e}")))?;
            Ok(Arc::new(Gbm::new(params)?) as ModelBox)
        });
        r.register("sabr", |p| {
            let params: SabrParams = serde_json::from_value(p.clone())
                .map_err(|e| invalid(format!("sabr parameters: {e}")))?;
            Ok(Arc::new(Sabr::new(params)?) as ModelBox)
        });
        r.register("bond_stock", |p| {
            let bond: BondParams = field(p, "bond")?;
            let m = BondStock::new(bond, field(p, "stock_s0")?, field(p, "stock_drift")?, field(p, "stock_sigma")?)?;
            Ok(Arc::new(m) as ModelBox)
        });
        r
    })
}

/// Builds a model from `{"type": name, ...params}`.
pub fn model_from_json(v: &Value) -> Result<ModelBox> {
    let name: String = field(v, "type")?;
    model_registry().build(&name, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bond_examples() {
        let g = TimeGrid::new(1.0, 12).unwrap();
        let flat = bond_path(&BondParams { rate: 0.0, s0: 2.0 }, &g);
        assert!(flat.iter().all(|v| *v == 2.0));
        let b = bond_path(&BondParams { rate: 0.06, s0: 1.0 }, &g);
        assert_eq!(b[0], 1.0);
        assert_eq!(b[12], 0.06f64.exp());
    }

    #[test]
    fn gbm_validation() {
        assert!(Gbm::new(GbmParams::scalar(-1.0, 0.0, 0.2)).is_err());
        let mut p = GbmParams::scalar(1.0, 0.0, 0.2);
        p.drift.push(0.1);
        assert!(Gbm::new(p).is_err());
        let deg = GbmParams { s0: vec![1.0, 1.0], drift: vec![0.0, 0.0], sigma: vec![vec![0.2], vec![0.1]] };
        assert!(Gbm::new(deg.clone()).is_ok());
        assert!(!deg.is_non_degenerate());
        assert!(GbmParams::independent(&[1.0, 1.0], &[0.0, 0.0], &[0.2, 0.1]).is_non_degenerate());
    }

    #[test]
    fn sabr_validation() {
        let ok = SabrParams { f0: 1.0, s: 0.2, alpha: 0.3, beta: 0.5, rho: 0.0 };
        assert!(ok.validate().is_ok());
        assert!(SabrParams { beta: 1.5, ..ok }.validate().is_err());
        assert!(SabrParams { rho: 1.0, ..ok }.validate().is_err());
        assert!(SabrParams { alpha: -0.1, ..ok }.validate().is_err());
    }

    #[test]
    fn registry_round_trip() {
        let v = serde_json::json!({"type": "sabr", "f0": 1.0, "s": 0.2, "alpha": 0.3, "beta": 0.5, "rho": 0.0});
        let m = model_from_json(&v).unwrap();
        assert_eq!(m.name(), "sabr");
        assert_eq!(m.n_drivers(), 2);
        let v = serde_json::json!({"type": "gbm", "s0": [1.0], "drift": [0.05], "sigma": [[0.2]]});
        assert_eq!(model_from_json(&v).unwrap().name(), "gbm");
        let v = serde_json::json!({"type": "bond_stock", "bond": {"rate": 0.06, "s0": 1.0},
            "stock_s0": 1.0, "stock_drift": 0.12, "stock_sigma": 0.15});
        assert_eq!(model_from_json(&v).unwrap().n_assets(), 2);
        assert!(model_from_json(&serde_json::json!({"type": "heston"})).is_err());
    }
}
