//! Share processes and predictable masks.
//!
//! Policies see a [`StepContext`] whose history stops at the current node, so
//! anything built from the public context is predictable by construction.
//! Rules that receive the full path (see [`PredictableMask::from_path_fn`])
//! must pass [`audit_predictability`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ensemble::{PathData, PathSource};
use crate::error::{Error, Result};
use crate::stats::{bin_of, quantile_edges};

/// Default bound on `|u|` per asset.
pub const DEFAULT_U_MAX: f64 = 1e6;

/// Read-only view of a path up to (and including) one node.
#[derive(Clone, Copy)]
pub struct History<'a> {
    data: &'a PathData,
    node: usize,
}

impl<'a> History<'a> {
    pub fn node(&self) -> usize {
        self.node
    }

    pub fn value(&self, k: usize) -> &'a [f64] {
        assert!(k <= self.node, "node {k} lies in the future of {}", self.node);
        self.data.value(k)
    }

    pub fn aux(&self, k: usize) -> &'a [f64] {
        assert!(k <= self.node, "node {k} lies in the future of {}", self.node);
        self.data.aux(k)
    }

    pub fn level(&self, k: usize) -> &'a [f64] {
        assert!(k <= self.node, "node {k} lies in the future of {}", self.node);
        self.data.level(k)
    }

    pub fn current_value(&self) -> &'a [f64] {
        self.data.value(self.node)
    }

    pub fn current_aux(&self) -> &'a [f64] {
        self.data.aux(self.node)
    }

    pub fn current_level(&self) -> &'a [f64] {
        self.data.level(self.node)
    }
}

/// Information available when choosing the position held over `[t_k, t_{k+1})`.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub step: usize,
    pub t: f64,
    pub path_index: usize,
    /// Wealth `X` at node `step`.
    pub wealth: f64,
    pub x0: f64,
    full: &'a PathData,
}

impl<'a> StepContext<'a> {
    pub fn new(step: usize, t: f64, path_index: usize, wealth: f64, x0: f64, path: &'a PathData) -> Self {
        Self { step, t, path_index, wealth, x0, full: path }
    }

    pub fn history(&self) -> History<'a> {
        History { data: self.full, node: self.step }
    }

    pub(crate) fn full_path(&self) -> &'a PathData {
        self.full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Constant,
    Deterministic,
    Feedback,
    Raw,
}

pub trait Policy: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn n_assets(&self) -> usize;
    fn kind(&self) -> PolicyKind;
    fn shares(&self, ctx: &StepContext, out: &mut [f64]);
    fn as_constant(&self) -> Option<&[f64]> {
        None
    }
}

pub type PolicyRef = Arc<dyn Policy>;

/// Clamps each entry to `[-u_max, u_max]`; returns whether any entry moved.
pub fn cap_shares(out: &mut [f64], u_max: f64) -> bool {
    let mut hit = false;
    for u in out.iter_mut() {
        if u.is_nan() {
            *u = 0.0;
            hit = true;
        } else if *u > u_max {
            *u = u_max;
            hit = true;
        } else if *u < -u_max {
            *u = -u_max;
            hit = true;
        }
    }
    hit
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy {
    u: Vec<f64>,
}

impl ConstantPolicy {
    pub fn new(u: Vec<f64>) -> Self {
        Self { u }
    }
}

impl Policy for ConstantPolicy {
    fn name(&self) -> String {
        "constant".into()
    }
    fn n_assets(&self) -> usize {
        self.u.len()
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Constant
    }
    fn shares(&self, _: &StepContext, out: &mut [f64]) {
        out.copy_from_slice(&self.u);
    }
    fn as_constant(&self) -> Option<&[f64]> {
        Some(&self.u)
    }
}

/// Shares per step, shared by all paths.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPolicy {
    n_assets: usize,
    table: Vec<f64>,
}

impl DeterministicPolicy {
    pub fn new(n_assets: usize, table: Vec<f64>) -> Result<Self> {
        if n_assets == 0 || table.len() % n_assets != 0 {
            return Err(Error::ShapeMismatch("deterministic table length".into()));
        }
        Ok(Self { n_assets, table })
    }

    pub fn from_fn(n_assets: usize, n_steps: usize, dt: f64, f: impl Fn(f64, &mut [f64])) -> Self {
        let mut table = vec![0.0; n_steps * n_assets];
        for k in 0..n_steps {
            f(k as f64 * dt, &mut table[k * n_assets..(k + 1) * n_assets]);
        }
        Self { n_assets, table }
    }

    pub fn n_steps(&self) -> usize {
        self.table.len() / self.n_assets
    }

    pub fn at(&self, step: usize) -> &[f64] {
        &self.table[step * self.n_assets..(step + 1) * self.n_assets]
    }
}

impl Policy for DeterministicPolicy {
    fn name(&self) -> String {
        "deterministic".into()
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Deterministic
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        out.copy_from_slice(self.at(ctx.step));
    }
}

pub type FeedbackFn = Arc<dyn Fn(&StepContext, &mut [f64]) + Send + Sync>;

/// Shares computed from the current context.
#[derive(Clone)]
pub struct FeedbackPolicy {
    name: String,
    n_assets: usize,
    f: FeedbackFn,
}

impl FeedbackPolicy {
    pub fn new(name: &str, n_assets: usize, f: impl Fn(&StepContext, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { name: name.into(), n_assets, f: Arc::new(f) }
    }
}

impl fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackPolicy").field("name", &self.name).finish()
    }
}

impl Policy for FeedbackPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        (self.f)(ctx, out)
    }
}

/// State variable used to bin paths at each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum StateVariable {
    /// Value of asset `i`.
    Asset(usize),
    /// Cumulative Brownian driver `B_j(t)`.
    Driver(usize),
    /// Auxiliary track `j` (e.g. stochastic volatility).
    Aux(usize),
}

impl StateVariable {
    #[inline]
    pub fn read(&self, h: &History) -> f64 {
        match *self {
            StateVariable::Asset(i) => h.current_value()[i],
            StateVariable::Driver(j) => h.current_level()[j],
            StateVariable::Aux(j) => h.current_aux()[j],
        }
    }

    #[inline]
    pub fn read_node(&self, p: &PathData, node: usize) -> f64 {
        match *self {
            StateVariable::Asset(i) => p.value(node)[i],
            StateVariable::Driver(j) => p.level(node)[j],
            StateVariable::Aux(j) => p.aux(node)[j],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBinning {
    pub state: StateVariable,
    pub n_bins: usize,
}

/// Equal-probability bin edges per step, estimated from a path sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges {
    pub binning: StateBinning,
    edges: Vec<Vec<f64>>,
}

impl BinEdges {
    pub fn estimate(binning: StateBinning, src: &dyn PathSource) -> Self {
        let n_steps = src.grid().n_steps();
        let states = crate::ensemble::par_map_paths(src, |_, p| {
            (0..n_steps).map(|k| binning.state.read_node(p, k)).collect::<Vec<f64>>()
        });
        let edges = (0..n_steps)
            .map(|k| {
                let col: Vec<f64> = states.iter().map(|s| s[k]).collect();
                quantile_edges(&col, binning.n_bins)
            })
            .collect();
        Self { binning, edges }
    }

    pub fn n_steps(&self) -> usize {
        self.edges.len()
    }

    pub fn n_bins(&self) -> usize {
        self.binning.n_bins
    }

    #[inline]
    pub fn bin(&self, step: usize, x: f64) -> usize {
        bin_of(&self.edges[step], x)
    }

    #[inline]
    pub fn bin_of_context(&self, ctx: &StepContext) -> usize {
        self.bin(ctx.step, self.binning.state.read(&ctx.history()))
    }

    #[inline]
    pub fn bin_of_path(&self, p: &PathData, step: usize) -> usize {
        self.bin(step, self.binning.state.read_node(p, step))
    }

    pub fn edges(&self, step: usize) -> &[f64] {
        &self.edges[step]
    }
}

/// A per-(step, bin) table of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedTable {
    pub edges: Arc<BinEdges>,
    pub n_assets: usize,
    /// `n_steps x n_bins x n_assets`.
    pub values: Vec<f64>,
}

impl BinnedTable {
    pub fn new(edges: Arc<BinEdges>, n_assets: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != edges.n_steps() * edges.n_bins() * n_assets {
            return Err(Error::ShapeMismatch("binned table size".into()));
        }
        Ok(Self { edges, n_assets, values })
    }

    #[inline]
    pub fn at(&self, step: usize, bin: usize) -> &[f64] {
        let o = (step * self.edges.n_bins() + bin) * self.n_assets;
        &self.values[o..o + self.n_assets]
    }
}

/// Feedback policy tabulated on a binned state grid.
#[derive(Debug, Clone)]
pub struct BinnedPolicy {
    pub table: BinnedTable,
}

impl Policy for BinnedPolicy {
    fn name(&self) -> String {
        "binned".into()
    }
    fn n_assets(&self) -> usize {
        self.table.n_assets
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        let b = self.table.edges.bin_of_context(ctx);
        out.copy_from_slice(self.table.at(ctx.step, b));
    }
}

/// Arbitrary shares per (path, step), tied to one ensemble.
#[derive(Debug, Clone)]
pub struct RawPolicy {
    n_paths: usize,
    n_steps: usize,
    n_assets: usize,
    table: Vec<f64>,
}

impl RawPolicy {
    pub fn from_table(n_paths: usize, n_steps: usize, n_assets: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != n_paths * n_steps * n_assets {
            return Err(Error::ShapeMismatch("raw policy table size".into()));
        }
        Ok(Self { n_paths, n_steps, n_assets, table })
    }

    /// Tabulates `f` on every (path, step) of `src`; wealth in the context is
    /// the wealth of this very policy started at `x0`.
    pub fn from_fn(
        src: &dyn PathSource,
        x0: f64,
        f: impl Fn(&StepContext, &mut [f64]) + Sync,
    ) -> Self {
        let grid = src.grid();
        let d = src.n_assets();
        let n = grid.n_steps();
        let rows = crate::ensemble::par_map_paths(src, |p, path| {
            let mut out = vec![0.0; n * d];
            let mut x = x0;
            for k in 0..n {
                let ctx = StepContext::new(k, grid.t(k), p, x, x0, path);
                f(&ctx, &mut out[k * d..(k + 1) * d]);
                let (s0, s1) = (path.value(k), path.value(k + 1));
                for i in 0..d {
                    x += out[k * d + i] * (s1[i] - s0[i]);
                }
            }
            out
        });
        Self { n_paths: src.n_paths(), n_steps: n, n_assets: d, table: rows.concat() }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
}

impl Policy for RawPolicy {
    fn name(&self) -> String {
        "raw".into()
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Raw
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        let o = (ctx.path_index * self.n_steps + ctx.step) * self.n_assets;
        out.copy_from_slice(&self.table[o..o + self.n_assets]);
    }
}

/// `Σ a_j u_j`.
#[derive(Debug, Clone)]
pub struct LinearCombination {
    terms: Vec<(f64, PolicyRef)>,
}

impl LinearCombination {
    pub fn new(terms: Vec<(f64, PolicyRef)>) -> Result<Self> {
        let d = terms.first().map(|t| t.1.n_assets()).unwrap_or(0);
        if d == 0 || terms.iter().any(|t| t.1.n_assets() != d) {
            return Err(Error::ShapeMismatch("combined policies must share a positive dimension".into()));
        }
        Ok(Self { terms })
    }
}

impl Policy for LinearCombination {
    fn name(&self) -> String {
        let parts: Vec<String> = self.terms.iter().map(|(a, p)| format!("{a}*{}", p.name())).collect();
        parts.join(" + ")
    }
    fn n_assets(&self) -> usize {
        self.terms[0].1.n_assets()
    }
    fn kind(&self) -> PolicyKind {
        self.terms.iter().map(|t| t.1.kind()).max().unwrap_or(PolicyKind::Constant)
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        let d = out.len();
        let mut tmp = vec![0.0; d];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (a, p) in &self.terms {
            p.shares(ctx, &mut tmp);
            for i in 0..d {
                out[i] += a * tmp[i];
            }
        }
    }
}

/// `a u + b v`.
pub fn combine(a: f64, u: &PolicyRef, b: f64, v: &PolicyRef) -> Result<PolicyRef> {
    Ok(Arc::new(LinearCombination::new(vec![(a, u.clone()), (b, v.clone())])?))
}

type MaskFn = Arc<dyn Fn(&StepContext, &mut [f64]) + Send + Sync>;
type PathMaskFn = Arc<dyn Fn(&PathData, usize, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum MaskRule {
    Context(MaskFn),
    Path(PathMaskFn),
}

/// `{0,1}` indicator per (path, step, asset).
#[derive(Clone)]
pub struct PredictableMask {
    name: String,
    n_assets: usize,
    rule: MaskRule,
}

impl fmt::Debug for PredictableMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PredictableMask").field("name", &self.name).field("n_assets", &self.n_assets).finish()
    }
}

impl PredictableMask {
    /// The rule returns, per asset, whether the step is inside the set.
    pub fn from_fn(name: &str, n_assets: usize, f: impl Fn(&StepContext, &mut [bool]) + Send + Sync + 'static) -> Self {
        let rule: MaskFn = Arc::new(move |ctx, out| {
            let mut b = vec![false; out.len()];
            f(ctx, &mut b);
            for (o, v) in out.iter_mut().zip(b) {
                *o = if v { 1.0 } else { 0.0 };
            }
        });
        Self { name: name.into(), n_assets, rule: MaskRule::Context(rule) }
    }

    /// Rule with access to the whole path. Must pass the predictability audit.
    pub fn from_path_fn(
        name: &str,
        n_assets: usize,
        f: impl Fn(&PathData, usize, &mut [bool]) + Send + Sync + 'static,
    ) -> Self {
        let rule: PathMaskFn = Arc::new(move |p, k, out| {
            let mut b = vec![false; out.len()];
            f(p, k, &mut b);
            for (o, v) in out.iter_mut().zip(b) {
                *o = if v { 1.0 } else { 0.0 };
            }
        });
        Self { name: name.into(), n_assets, rule: MaskRule::Path(rule) }
    }

    pub fn all(n_assets: usize) -> Self {
        Self::from_fn("all", n_assets, |_, o| o.iter_mut().for_each(|v| *v = true))
    }

    pub fn none(n_assets: usize) -> Self {
        Self::from_fn("none", n_assets, |_, o| o.iter_mut().for_each(|v| *v = false))
    }

    /// Steps with `t0 <= t_k < t1`, all assets.
    pub fn time_window(n_assets: usize, t0: f64, t1: f64) -> Self {
        Self::from_fn(&format!("time[{t0},{t1})"), n_assets, move |ctx, o| {
            let inside = ctx.t >= t0 && ctx.t < t1;
            o.iter_mut().for_each(|v| *v = inside)
        })
    }

    /// Only asset `i`, every step.
    pub fn asset(n_assets: usize, i: usize) -> Self {
        Self::from_fn(&format!("asset{i}"), n_assets, move |_, o| {
            for (j, v) in o.iter_mut().enumerate() {
                *v = j == i;
            }
        })
    }

    /// Steps where the state variable is strictly above `level`.
    pub fn state_above(n_assets: usize, state: StateVariable, level: f64) -> Self {
        Self::from_fn(&format!("{state:?}>{level}"), n_assets, move |ctx, o| {
            let inside = state.read(&ctx.history()) > level;
            o.iter_mut().for_each(|v| *v = inside)
        })
    }

    pub fn union(&self, other: &PredictableMask) -> PredictableMask {
        let (a, b) = (self.clone(), other.clone());
        let name = format!("({})|({})", self.name, other.name);
        let d = self.n_assets;
        let rule: PathMaskFn = Arc::new(move |p, k, out| {
            let mut tmp = vec![0.0; out.len()];
            a.eval_path(p, k, out);
            b.eval_path(p, k, &mut tmp);
            for (o, t) in out.iter_mut().zip(tmp) {
                *o = o.max(t);
            }
        });
        let both_ctx = matches!(self.rule, MaskRule::Context(_)) && matches!(other.rule, MaskRule::Context(_));
        if both_ctx {
            let (a, b) = (self.clone(), other.clone());
            let f: MaskFn = Arc::new(move |ctx, out| {
                let mut tmp = vec![0.0; out.len()];
                a.shares(ctx, out);
                b.shares(ctx, &mut tmp);
                for (o, t) in out.iter_mut().zip(tmp) {
                    *o = o.max(t);
                }
            });
            return PredictableMask { name, n_assets: d, rule: MaskRule::Context(f) };
        }
        PredictableMask { name, n_assets: d, rule: MaskRule::Path(rule) }
    }

    pub fn complement(&self) -> PredictableMask {
        let a = self.clone();
        let name = format!("!({})", self.name);
        match &self.rule {
            MaskRule::Context(_) => {
                let f: MaskFn = Arc::new(move |ctx, out| {
                    a.shares(ctx, out);
                    out.iter_mut().for_each(|v| *v = 1.0 - *v);
                });
                PredictableMask { name, n_assets: self.n_assets, rule: MaskRule::Context(f) }
            }
            MaskRule::Path(_) => {
                let f: PathMaskFn = Arc::new(move |p, k, out| {
                    a.eval_path(p, k, out);
                    out.iter_mut().for_each(|v| *v = 1.0 - *v);
                });
                PredictableMask { name, n_assets: self.n_assets, rule: MaskRule::Path(f) }
            }
        }
    }

    fn eval_path(&self, p: &PathData, k: usize, out: &mut [f64]) {
        match &self.rule {
            MaskRule::Context(f) => {
                let ctx = StepContext::new(k, f64::NAN, 0, f64::NAN, f64::NAN, p);
                f(&ctx, out)
            }
            MaskRule::Path(f) => f(p, k, out),
        }
    }

    /// Whether the rule can only see the history (audit is then vacuous).
    pub fn is_context_rule(&self) -> bool {
        matches!(self.rule, MaskRule::Context(_))
    }
}

impl Policy for PredictableMask {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Feedback
    }
    fn shares(&self, ctx: &StepContext, out: &mut [f64]) {
        match &self.rule {
            MaskRule::Context(f) => f(ctx, out),
            MaskRule::Path(f) => f(ctx.full_path(), ctx.step, out),
        }
    }
}

/// Overwrites everything strictly after node `k` (and increments from step `k`).
fn scramble_future(p: &PathData, k: usize) -> PathData {
    let mut q = p.clone();
    let d = q.n_assets;
    for v in q.values[(k + 1) * d..].iter_mut() {
        *v = 1.37 * *v + 0.731;
    }
    let a = q.n_aux;
    for v in q.aux[(k + 1) * a..].iter_mut() {
        *v = 0.59 * *v + 0.113;
    }
    let m = q.n_drivers;
    for v in q.increments[k * m..].iter_mut() {
        *v = 0.25 - 2.0 * *v;
    }
    q.rebuild_levels();
    q
}

/// Checks on up to `max_paths` paths that the rule's output at every step is
/// unchanged when the path after that step's left node is altered.
pub fn audit_predictability(policy: &dyn Policy, src: &dyn PathSource, x0: f64, max_paths: usize) -> Result<()> {
    let grid = src.grid();
    let d = policy.n_assets();
    let mut buf = src.new_buffer();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for p in 0..src.n_paths().min(max_paths) {
        src.load_path(p, &mut buf);
        let mut x = x0;
        for k in 0..grid.n_steps() {
            let scr = scramble_future(&buf, k);
            policy.shares(&StepContext::new(k, grid.t(k), p, x, x0, &buf), &mut a);
            policy.shares(&StepContext::new(k, grid.t(k), p, x, x0, &scr), &mut b);
            if a.iter().zip(&b).any(|(u, v)| u.to_bits() != v.to_bits()) {
                return Err(Error::InvalidMask(format!(
                    "'{}' at step {k} of path {p} depends on data after t_{k}",
                    policy.name()
                )));
            }
            let (s0, s1) = (buf.value(k), buf.value(k + 1));
            for i in 0..d.min(s0.len()) {
                x += a[i] * (s1[i] - s0[i]);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::LazyEnsemble;
    use crate::grid::TimeGrid;
    use crate::market::{Gbm, GbmParams};

    fn src() -> LazyEnsemble {
        let m = Arc::new(Gbm::new(GbmParams::independent(&[1.0, 2.0], &[0.0, 0.05], &[0.2, 0.3])).unwrap());
        LazyEnsemble::new(m, TimeGrid::new(1.0, 8).unwrap(), 16, 3)
    }

    #[test]
    fn cap_clamps() {
        let mut u = [2e6, -3e6, 5.0, f64::NAN];
        assert!(cap_shares(&mut u, 1e6));
        assert_eq!(u, [1e6, -1e6, 5.0, 0.0]);
        let mut v = [1.0, -1.0];
        assert!(!cap_shares(&mut v, 1e6));
    }

    #[test]
    fn context_masks_pass_audit() {
        let s = src();
        let m = PredictableMask::state_above(2, StateVariable::Asset(0), 1.0)
            .union(&PredictableMask::time_window(2, 0.25, 0.5));
        audit_predictability(&m, &s, 0.0, 16).unwrap();
        let wealth = FeedbackPolicy::new("w", 2, |ctx, o| o.iter_mut().for_each(|v| *v = ctx.wealth.sin()));
        audit_predictability(&wealth, &s, 1.0, 16).unwrap();
    }

    #[test]
    fn lookahead_mask_fails_audit() {
        let s = src();
        let peek = PredictableMask::from_path_fn("peek", 2, |p, k, o| {
            let up = p.value(k + 1)[0] > p.value(k)[0];
            o.iter_mut().for_each(|v| *v = up)
        });
        assert!(matches!(audit_predictability(&peek, &s, 0.0, 16), Err(Error::InvalidMask(_))));
        let honest = PredictableMask::from_path_fn("now", 2, |p, k, o| {
            let up = p.value(k)[0] > 1.0;
            o.iter_mut().for_each(|v| *v = up)
        });
        audit_predictability(&honest, &s, 0.0, 16).unwrap();
    }

    #[test]
    #[should_panic(expected = "future")]
    fn history_refuses_future_nodes() {
        let s = src();
        let p = s.new_buffer();
        let ctx = StepContext::new(2, 0.25, 0, 0.0, 0.0, &p);
        let _ = ctx.history().value(3);
    }

    #[test]
    fn raw_from_fn_tracks_wealth() {
        let s = src();
        let raw = RawPolicy::from_fn(&s, 1.0, |ctx, o| {
            o[0] = ctx.wealth;
            o[1] = 0.0;
        });
        let mut buf = s.new_buffer();
        s.load_path(5, &mut buf);
        let mut x = 1.0;
        let mut out = [0.0; 2];
        for k in 0..8 {
            raw.shares(&StepContext::new(k, 0.0, 5, 0.0, 1.0, &buf), &mut out);
            assert_eq!(out[0], x);
            x += out[0] * (buf.value(k + 1)[0] - buf.value(k)[0]);
        }
    }

    #[test]
    fn combination_is_linear() {
        let s = src();
        let u: PolicyRef = Arc::new(ConstantPolicy::new(vec![1.0, 2.0]));
        let v: PolicyRef = Arc::new(PredictableMask::asset(2, 1));
        let w = combine(2.0, &u, -3.0, &v).unwrap();
        let buf = s.new_buffer();
        let mut out = [0.0; 2];
        w.shares(&StepContext::new(0, 0.0, 0, 0.0, 0.0, &buf), &mut out);
        assert_eq!(out, [2.0, 1.0]);
        assert_eq!(w.kind(), PolicyKind::Feedback);
    }
}
