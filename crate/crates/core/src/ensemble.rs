//! Simulated paths: a materialised [`PathEnsemble`] and an on-demand
//! [`LazyEnsemble`], both exposed through [`PathSource`].

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::market::MarketModel;
use crate::rng::PathRng;

/// One path: values per node, Brownian increments per step, aux tracks per
/// node and cumulative driver levels per node. All node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathData {
    pub n_steps: usize,
    pub n_assets: usize,
    pub n_drivers: usize,
    pub n_aux: usize,
    pub values: Vec<f64>,
    pub increments: Vec<f64>,
    pub aux: Vec<f64>,
    pub levels: Vec<f64>,
}

impl PathData {
    pub fn new(n_steps: usize, n_assets: usize, n_drivers: usize, n_aux: usize) -> Self {
        Self {
            n_steps,
            n_assets,
            n_drivers,
            n_aux,
            values: vec![0.0; (n_steps + 1) * n_assets],
            increments: vec![0.0; n_steps * n_drivers],
            aux: vec![0.0; (n_steps + 1) * n_aux],
            levels: vec![0.0; (n_steps + 1) * n_drivers],
        }
    }

    #[inline]
    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.n_assets..(node + 1) * self.n_assets]
    }

    #[inline]
    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.n_drivers..(step + 1) * self.n_drivers]
    }

    #[inline]
    pub fn aux(&self, node: usize) -> &[f64] {
        &self.aux[node * self.n_aux..(node + 1) * self.n_aux]
    }

    /// Cumulative Brownian level `B_j(t_node)`.
    #[inline]
    pub fn level(&self, node: usize) -> &[f64] {
        &self.levels[node * self.n_drivers..(node + 1) * self.n_drivers]
    }

    pub(crate) fn rebuild_levels(&mut self) {
        let m = self.n_drivers;
        for j in 0..m {
            self.levels[j] = 0.0;
        }
        for k in 0..self.n_steps {
            for j in 0..m {
                self.levels[(k + 1) * m + j] = self.levels[k * m + j] + self.increments[k * m + j];
            }
        }
    }
}

/// Runs `model` along one path using the counter-based stream `(seed, path)`.
pub fn simulate_path(model: &dyn MarketModel, grid: &TimeGrid, seed: u64, path: usize, out: &mut PathData) {
    let d = model.n_assets();
    let m = model.n_drivers();
    let a = model.n_aux();
    let n = grid.n_steps();
    let mut rng = PathRng::new(seed, path as u64);
    rng.fill_increments(grid.dt(), &mut out.increments);
    {
        let (v0, _) = out.values.split_at_mut(d);
        let (a0, _) = out.aux.split_at_mut(a);
        model.initial_state(v0, a0);
    }
    for k in 0..n {
        let (cur_v, next_v) = out.values.split_at_mut((k + 1) * d);
        let (cur_a, next_a) = out.aux.split_at_mut((k + 1) * a);
        model.step(
            grid.t(k),
            grid.t(k + 1),
            &cur_v[k * d..],
            &cur_a[k * a..],
            &out.increments[k * m..(k + 1) * m],
            &mut next_v[..d],
            &mut next_a[..a],
        );
    }
    out.rebuild_levels();
}

/// Anything that can hand out paths by index.
pub trait PathSource: Sync {
    fn grid(&self) -> TimeGrid;
    fn n_paths(&self) -> usize;
    fn n_assets(&self) -> usize;
    fn n_drivers(&self) -> usize;
    fn n_aux(&self) -> usize;
    fn model(&self) -> Option<Arc<dyn MarketModel>>;
    fn load_path(&self, path: usize, buf: &mut PathData);

    fn new_buffer(&self) -> PathData {
        PathData::new(self.grid().n_steps(), self.n_assets(), self.n_drivers(), self.n_aux())
    }

    fn require_model(&self) -> Result<Arc<dyn MarketModel>> {
        self.model().ok_or_else(|| {
            Error::UnsupportedModel("ensemble carries no model coefficients".into())
        })
    }
}

/// Regenerates each path from its seed on request; nothing is stored.
#[derive(Debug, Clone)]
pub struct LazyEnsemble {
    model: Arc<dyn MarketModel>,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
}

impl LazyEnsemble {
    pub fn new(model: Arc<dyn MarketModel>, grid: TimeGrid, n_paths: usize, seed: u64) -> Self {
        Self { model, grid, n_paths, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl PathSource for LazyEnsemble {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn n_assets(&self) -> usize {
        self.model.n_assets()
    }
    fn n_drivers(&self) -> usize {
        self.model.n_drivers()
    }
    fn n_aux(&self) -> usize {
        self.model.n_aux()
    }
    fn model(&self) -> Option<Arc<dyn MarketModel>> {
        Some(self.model.clone())
    }
    fn load_path(&self, path: usize, buf: &mut PathData) {
        simulate_path(self.model.as_ref(), &self.grid, self.seed, path, buf);
    }
}

/// Path-major in-memory ensemble.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    n_assets: usize,
    n_drivers: usize,
    n_aux: usize,
    seed: Option<u64>,
    model: Option<Arc<dyn MarketModel>>,
    values: Vec<f64>,
    increments: Vec<f64>,
    aux: Vec<f64>,
}

impl PathEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grid: TimeGrid,
        n_paths: usize,
        n_assets: usize,
        n_drivers: usize,
        n_aux: usize,
        values: Vec<f64>,
        increments: Vec<f64>,
        aux: Vec<f64>,
    ) -> Result<Self> {
        let nodes = grid.n_nodes();
        let steps = grid.n_steps();
        if values.len() != n_paths * nodes * n_assets
            || increments.len() != n_paths * steps * n_drivers
            || aux.len() != n_paths * nodes * n_aux
        {
            return Err(Error::ShapeMismatch("ensemble arrays do not match declared dimensions".into()));
        }
        Ok(Self { grid, n_paths, n_assets, n_drivers, n_aux, seed: None, model: None, values, increments, aux })
    }

    /// Attaches model coefficients (e.g. after importing values from disk).
    pub fn with_model(mut self, model: Arc<dyn MarketModel>) -> Result<Self> {
        if model.n_assets() != self.n_assets || model.n_aux() != self.n_aux {
            return Err(Error::ShapeMismatch(format!(
                "model '{}' does not match ensemble layout",
                model.name()
            )));
        }
        self.model = Some(model);
        Ok(self)
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn value(&self, path: usize, node: usize, asset: usize) -> f64 {
        self.values[(path * self.grid.n_nodes() + node) * self.n_assets + asset]
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize, driver: usize) -> f64 {
        self.increments[(path * self.grid.n_steps() + step) * self.n_drivers + driver]
    }

    #[inline]
    pub fn aux_value(&self, path: usize, node: usize, track: usize) -> f64 {
        self.aux[(path * self.grid.n_nodes() + node) * self.n_aux + track]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn aux_values(&self) -> &[f64] {
        &self.aux
    }

    pub fn path(&self, p: usize) -> PathData {
        let mut b = self.new_buffer();
        self.load_path(p, &mut b);
        b
    }
}

impl PathSource for PathEnsemble {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn n_assets(&self) -> usize {
        self.n_assets
    }
    fn n_drivers(&self) -> usize {
        self.n_drivers
    }
    fn n_aux(&self) -> usize {
        self.n_aux
    }
    fn model(&self) -> Option<Arc<dyn MarketModel>> {
        self.model.clone()
    }
    fn load_path(&self, p: usize, buf: &mut PathData) {
        let nodes = self.grid.n_nodes();
        let steps = self.grid.n_steps();
        let vl = nodes * self.n_assets;
        let il = steps * self.n_drivers;
        let al = nodes * self.n_aux;
        buf.values.copy_from_slice(&self.values[p * vl..(p + 1) * vl]);
        buf.increments.copy_from_slice(&self.increments[p * il..(p + 1) * il]);
        buf.aux.copy_from_slice(&self.aux[p * al..(p + 1) * al]);
        buf.rebuild_levels();
    }
}

/// Paths per parallel work item. Fixed so reductions are thread-count independent.
pub const CHUNK: usize = 512;

fn chunks(n: usize) -> usize {
    n.div_ceil(CHUNK)
}

/// Maps every path in order; the output order is the path order.
pub fn par_map_paths<T, F>(src: &dyn PathSource, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &PathData) -> T + Sync,
{
    let n = src.n_paths();
    let parts: Vec<Vec<T>> = (0..chunks(n))
        .into_par_iter()
        .map(|c| {
            let mut buf = src.new_buffer();
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi)
                .map(|p| {
                    src.load_path(p, &mut buf);
                    f(p, &buf)
                })
                .collect()
        })
        .collect();
    parts.into_iter().flatten().collect()
}

/// Folds paths chunk by chunk, then merges chunk results in chunk order.
pub fn par_fold_paths<A, I, F, M>(src: &dyn PathSource, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize, &PathData) + Sync,
    M: Fn(&mut A, A),
{
    let n = src.n_paths();
    let parts: Vec<A> = (0..chunks(n))
        .into_par_iter()
        .map(|c| {
            let mut buf = src.new_buffer();
            let mut acc = init();
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            for p in lo..hi {
                src.load_path(p, &mut buf);
                fold(&mut acc, p, &buf);
            }
            acc
        })
        .collect();
    let mut out = init();
    for part in parts {
        merge(&mut out, part);
    }
    out
}

/// Copies any source into memory.
pub fn materialize(src: &dyn PathSource) -> PathEnsemble {
    let grid = src.grid();
    let n = src.n_paths();
    let (d, m, a) = (src.n_assets(), src.n_drivers(), src.n_aux());
    let vl = grid.n_nodes() * d;
    let il = grid.n_steps() * m;
    let al = grid.n_nodes() * a;
    let mut values = vec![0.0; n * vl];
    let mut increments = vec![0.0; n * il];
    let mut aux = vec![0.0; n * al];
    let mut slots = Vec::with_capacity(chunks(n));
    {
        let (mut vr, mut ir, mut ar) = (&mut values[..], &mut increments[..], &mut aux[..]);
        for c in 0..chunks(n) {
            let cnt = (n - c * CHUNK).min(CHUNK);
            let (v, vrest) = std::mem::take(&mut vr).split_at_mut(cnt * vl);
            let (i, irest) = std::mem::take(&mut ir).split_at_mut(cnt * il);
            let (x, arest) = std::mem::take(&mut ar).split_at_mut(cnt * al);
            slots.push((c, v, i, x));
            vr = vrest;
            ir = irest;
            ar = arest;
        }
    }
    slots.into_par_iter().for_each(|(c, v, i, x)| {
        let mut buf = src.new_buffer();
        let cnt = v.len() / vl.max(1);
        for k in 0..cnt {
            src.load_path(c * CHUNK + k, &mut buf);
            v[k * vl..(k + 1) * vl].copy_from_slice(&buf.values);
            i[k * il..(k + 1) * il].copy_from_slice(&buf.increments);
            x[k * al..(k + 1) * al].copy_from_slice(&buf.aux);
        }
    });
    PathEnsemble {
        grid,
        n_paths: n,
        n_assets: d,
        n_drivers: m,
        n_aux: a,
        seed: None,
        model: src.model(),
        values,
        increments,
        aux,
    }
}

impl From<&LazyEnsemble> for PathEnsemble {
    fn from(l: &LazyEnsemble) -> Self {
        let mut e = materialize(l);
        e.seed = Some(l.seed);
        e
    }
}
