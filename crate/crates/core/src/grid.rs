use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform time grid on `[0, horizon]` with `n_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Time of node `k`. The last node is exactly the horizon.
    pub fn t(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t(k)).collect()
    }

    /// Index of the last node with `t_k <= t`.
    pub fn node_at_or_before(&self, t: f64) -> usize {
        let k = (t / self.dt()).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }
}

/// Convenience constructor mirroring [`TimeGrid::new`].
pub fn make_time_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, n_steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_grid() {
        let g = make_time_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn single_period() {
        let g = make_time_grid(1.0, 1).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 1.0]);
    }

    #[test]
    fn endpoint_is_exact() {
        let g = make_time_grid(0.5, 250).unwrap();
        assert_eq!(g.t(250), 0.5);
        for n in 1..2000 {
            for &h in &[0.1, 0.3, 0.7, 1.0 / 3.0, 50.0] {
                let g = TimeGrid::new(h, n).unwrap();
                assert_eq!(g.t(n), h);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(-1.0, 3).is_err());
        assert!(TimeGrid::new(f64::NAN, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
