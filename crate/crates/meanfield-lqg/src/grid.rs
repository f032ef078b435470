//! Uniform time grid and grid-sampled matrix-valued coefficients.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Uniform discretization of the horizon [0, T] into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// Builds a grid with `steps` uniform intervals on [0, T].
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Grid(format!("horizon T must be positive, got {horizon}")));
        }
        if steps < 1 {
            return Err(Error::Grid("steps must be >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    /// Horizon T.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    /// Interval length dt = T / steps.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `k` (k = 0 .. steps).
    pub fn time(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * k as f64 / self.steps as f64
    }
}

/// Nodewise storage of one matrix-valued coefficient path.
#[derive(Debug, Clone, PartialEq)]
enum PathData {
    /// Same matrix at every node.
    Constant(DMatrix<f64>),
    /// One matrix per node (`n_nodes` entries).
    Nodes(Vec<DMatrix<f64>>),
}

/// A bounded measurable matrix function on [0, T], sampled at grid nodes.
///
/// Shapes are fixed across nodes. Constant paths are stored once and
/// broadcast, which also lets scenario round-trips preserve whether a
/// coefficient was given as a constant or as per-node samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPath {
    rows: usize,
    cols: usize,
    n_nodes: usize,
    data: PathData,
}

impl CoefficientPath {
    /// Constant path equal to `value` at every node.
    pub fn constant(value: DMatrix<f64>, n_nodes: usize) -> Self {
        Self {
            rows: value.nrows(),
            cols: value.ncols(),
            n_nodes,
            data: PathData::Constant(value),
        }
    }

    /// Zero path of the given shape.
    pub fn zeros(rows: usize, cols: usize, n_nodes: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols), n_nodes)
    }

    /// Path from explicit per-node values; shapes must agree.
    pub fn from_nodes(nodes: Vec<DMatrix<f64>>, name: &str) -> Result<Self> {
        let first = nodes.first().ok_or_else(|| Error::Scenario {
            name: name.into(),
            message: "per-node value list is empty".into(),
        })?;
        let (rows, cols) = (first.nrows(), first.ncols());
        for (k, m) in nodes.iter().enumerate() {
            if m.nrows() != rows || m.ncols() != cols {
                return Err(Error::Shape {
                    name: format!("{name}[{k}]"),
                    expected: format!("{rows}x{cols}"),
                    got: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
        }
        Ok(Self {
            rows,
            cols,
            n_nodes: nodes.len(),
            data: PathData::Nodes(nodes),
        })
    }

    /// Row count of every node value.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Column count of every node value.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of nodes the path is sampled on.
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Whether the path was stored as a single broadcast constant.
    pub fn is_constant(&self) -> bool {
        matches!(self.data, PathData::Constant(_))
    }

    /// Value at node `k`.
    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        debug_assert!(k < self.n_nodes, "node {k} out of range {}", self.n_nodes);
        match &self.data {
            PathData::Constant(m) => m,
            PathData::Nodes(v) => &v[k],
        }
    }

    /// Midpoint value on interval `k` (average of the two adjacent nodes).
    pub fn mid(&self, k: usize) -> DMatrix<f64> {
        match &self.data {
            PathData::Constant(m) => m.clone(),
            PathData::Nodes(v) => {
                debug_assert!(k + 1 < self.n_nodes);
                (&v[k] + &v[k + 1]) * 0.5
            }
        }
    }

    /// True when every entry at every node is finite.
    pub fn all_finite(&self) -> bool {
        match &self.data {
            PathData::Constant(m) => m.iter().all(|x| x.is_finite()),
            PathData::Nodes(v) => v.iter().all(|m| m.iter().all(|x| x.is_finite())),
        }
    }

    /// Largest spectral norm over all nodes.
    pub fn sup_spectral_norm(&self) -> f64 {
        match &self.data {
            PathData::Constant(m) => crate::linalg::spectral_norm(m),
            PathData::Nodes(v) => v
                .iter()
                .map(crate::linalg::spectral_norm)
                .fold(0.0, f64::max),
        }
    }

    /// Largest eigenvalue of the symmetric part, maximized over nodes.
    pub fn sup_sym_eig(&self) -> f64 {
        match &self.data {
            PathData::Constant(m) => crate::linalg::max_sym_eigenvalue(m),
            PathData::Nodes(v) => v
                .iter()
                .map(crate::linalg::max_sym_eigenvalue)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Nodewise map, preserving constant storage.
    pub fn map<F: Fn(&DMatrix<f64>) -> DMatrix<f64>>(&self, f: F) -> Self {
        let data = match &self.data {
            PathData::Constant(m) => PathData::Constant(f(m)),
            PathData::Nodes(v) => PathData::Nodes(v.iter().map(&f).collect()),
        };
        let (rows, cols) = match &data {
            PathData::Constant(m) => (m.nrows(), m.ncols()),
            PathData::Nodes(v) => (v[0].nrows(), v[0].ncols()),
        };
        Self {
            rows,
            cols,
            n_nodes: self.n_nodes,
            data,
        }
    }

    /// Path scaled by a constant factor.
    pub fn scaled(&self, c: f64) -> Self {
        self.map(|m| m * c)
    }

    /// Largest absolute entrywise difference to another path of equal shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        assert_eq!(self.n_nodes, other.n_nodes);
        let mut worst = 0.0f64;
        for k in 0..self.n_nodes {
            let a = self.at(k);
            let b = other.at(k);
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}
