//! Risk contributions and risk budgeting for single-period portfolios and
//! continuous-time investment policies, with Monte Carlo simulators for the
//! underlying diffusions.
//!
//! Convention: the marginal contribution process `c` of a policy `u`
//! satisfies `Var(X_T) = E ∫ uᵀc dt`, and risk contributions are `k = u ⊙ c`.

pub mod barrier;
pub mod budgeting;
pub mod contribution;
pub mod deviation;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod io;
pub mod market;
pub mod policy;
pub mod registry;
pub mod rng;
pub mod single_period;
pub mod stats;
pub mod strategies;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{make_time_grid, TimeGrid};
pub use stats::{mean_and_stderr, Estimate};
