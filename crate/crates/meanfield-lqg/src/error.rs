//! Error type shared by all solver and simulation modules.

use thiserror::Error;

/// Everything that can go wrong while loading a scenario, integrating the
/// equations, or running a simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// Scenario file could not be read.
    #[error("failed to read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Scenario file is not valid JSON.
    #[error("failed to parse scenario {path}: {message}")]
    Parse { path: String, message: String },

    /// A matrix in the scenario has dimensions inconsistent with the declared
    /// state/control dimensions or grid length.
    #[error("shape error for {name}: expected {expected}, got {got}")]
    Shape {
        name: String,
        expected: String,
        got: String,
    },

    /// Grid parameters are unusable (steps < 1 or T <= 0).
    #[error("grid error: {0}")]
    Grid(String),

    /// A scenario entry is missing, non-finite, or otherwise malformed.
    #[error("invalid scenario data for {name}: {message}")]
    Scenario { name: String, message: String },

    /// Two objects that must share a time grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A control-weighting matrix R + D'PD (or its major-agent analogue)
    /// failed its positive-definite factorization at a grid node.
    #[error("control weighting not positive definite at node {node} (t={t}): {name}")]
    NotPositiveDefinite { name: String, node: usize, t: f64 },

    /// A linear node solve hit a singular or numerically singular matrix.
    #[error("singular solve at node {node}: {name} (condition estimate {cond:.3e})")]
    SingularSolve { name: String, node: usize, cond: f64 },

    /// An integration produced NaN or infinity.
    #[error("non-finite values in {name} at node {node}; integration blew up")]
    NonFinite { name: String, node: usize },

    /// Fixed-point iteration did not reach tolerance.
    #[error(
        "no convergence after {iterations} iterations: last update {last_delta:.3e}, \
         last contraction factor {last_factor:.3}"
    )]
    NoConvergence {
        iterations: usize,
        last_delta: f64,
        last_factor: f64,
    },

    /// Requested simulation exceeds the configured work budget.
    #[error("simulation budget exceeded: N*paths*steps = {requested} > {budget}")]
    BudgetExceeded { requested: u64, budget: u64 },

    /// Oracle population size above the stacked-system cap.
    #[error("oracle population N={n} exceeds cap {cap}; the stacked system has (N+1)*n states")]
    OracleCap { n: usize, cap: usize },

    /// Any other precondition violation.
    #[error("{0}")]
    Invalid(String),
}
