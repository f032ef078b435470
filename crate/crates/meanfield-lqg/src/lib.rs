//! Numerical toolkit for a mixed social-optimum / Nash mean-field LQG problem.
//!
//! One major agent and N statistically identical minor agents interact through
//! the empirical state average. The minors cooperate (they minimize the sum of
//! their costs) while the major agent plays a non-cooperative game against the
//! minor coalition. In the large-population limit the empirical average is
//! replaced by a conditional mean given the common noise, and the best
//! responses are synthesized from two Riccati equations plus a mean-field
//! forward-backward SDE consistency condition.
//!
//! The crate is organized along that pipeline:
//!
//! * [`model`] - problem data (time grid, coefficient paths, scenario files)
//!   and standing-assumption checks;
//! * [`riccati`] - backward RK4 integration of the two Riccati equations and
//!   the state-feedback gains;
//! * [`ccfield`] - the stacked consistency-condition system, its affine
//!   decoupling-field solution, an independent Picard/discounting solver,
//!   contraction diagnostics, and sampled trajectories of all consistency
//!   processes;
//! * [`population`] - Euler-Maruyama simulation of the full N+1 agent system
//!   under arbitrary strategy profiles, cost evaluation, and an exact
//!   small-N stacked oracle for the social cost;
//! * [`verify`] - convergence-rate sweeps, log-log slope fits, the adjoint
//!   representation of the team multiplier, and the mean-field BSDE
//!   approximation estimates.
//!
//! Monte Carlo work is parallelized across sample paths with rayon when the
//! `parallel` feature (default) is enabled. All noise is generated by a
//! counter-based deterministic stream keyed by (seed, path, node, channel),
//! and reductions run in a fixed chunk order, so results are bit-identical
//! across thread counts and across the sequential fallback.

pub mod error;
pub mod exec;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod rng;

pub mod ccfield;
pub mod population;
pub mod riccati;
pub mod verify;

pub mod csvio;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
