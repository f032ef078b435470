//! Problem data: dimensions, time grid, coefficient paths, scenario files,
//! and standing-assumption checks.
//!
//! The model describes one major agent and a population of exchangeable minor
//! agents coupled through the empirical state average:
//!
//! * major state: `dx0 = (A0 x0 + B0 u0 + F0 xavg) dt + (C0 x0 + D0 u0 + Ftilde0 xavg) dW0`
//! * minor state: `dxi = (A xi + B ui + F xavg) dt + (C xi + D ui + Ftilde xavg + Gtilde x0) dWi`
//!
//! with quadratic tracking costs weighting `x0 - H0 xavg` for the major agent
//! and `xi - H x0 - Hhat xavg` for each minor agent.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::grid::{CoefficientPath, TimeGrid};
use crate::linalg;
use crate::{Error, Result};

/// Major-agent coefficient paths.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorCoeffs {
    /// State drift A0 (n x n).
    pub a0: CoefficientPath,
    /// Control drift B0 (n x m).
    pub b0: CoefficientPath,
    /// State diffusion C0 (n x n).
    pub c0: CoefficientPath,
    /// Control diffusion D0 (n x m).
    pub d0: CoefficientPath,
    /// Population-average drift coupling F0 (n x n).
    pub f0: CoefficientPath,
    /// Population-average diffusion coupling Ftilde0 (n x n).
    pub ftilde0: CoefficientPath,
    /// State cost weight Q0 (n x n, symmetric PSD).
    pub q0: CoefficientPath,
    /// Tracking map H0 (n x n): the major tracks H0 * xavg.
    pub h0: CoefficientPath,
    /// Control cost weight R0 (m x m, symmetric PD).
    pub r0: CoefficientPath,
}

/// Minor-agent coefficient paths (shared by all minors).
#[derive(Debug, Clone, PartialEq)]
pub struct MinorCoeffs {
    /// State drift A (n x n).
    pub a: CoefficientPath,
    /// Control drift B (n x m).
    pub b: CoefficientPath,
    /// State diffusion C (n x n).
    pub c: CoefficientPath,
    /// Control diffusion D (n x m).
    pub d: CoefficientPath,
    /// Population-average drift coupling F (n x n).
    pub f: CoefficientPath,
    /// Population-average diffusion coupling Ftilde (n x n).
    pub ftilde: CoefficientPath,
    /// Major-state diffusion coupling Gtilde (n x n).
    pub gtilde: CoefficientPath,
    /// State cost weight Q (n x n, symmetric PSD).
    pub q: CoefficientPath,
    /// Major-tracking map H (n x n): minors track H x0 + Hhat xavg.
    pub h: CoefficientPath,
    /// Average-tracking map Hhat (n x n).
    pub hhat: CoefficientPath,
    /// Control cost weight R (m x m, symmetric PD).
    pub r: CoefficientPath,
}

/// The single source of problem truth: dimensions, grid, initial states, and
/// every coefficient path.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Minor-population size used by simulation (the limiting solves are
    /// independent of it).
    pub n_minor: usize,
    /// Shared time grid.
    pub grid: TimeGrid,
    /// Major initial state.
    pub xi0: DVector<f64>,
    /// Minor initial state (identical across agents).
    pub xi: DVector<f64>,
    /// Major coefficients.
    pub major: MajorCoeffs,
    /// Minor coefficients.
    pub minor: MinorCoeffs,
}

/// Default PSD tolerance for the state-cost weights.
pub const DEFAULT_PSD_TOL: f64 = 1e-10;
/// Uniform positivity threshold for the control-cost weights.
pub const PD_TOL: f64 = 1e-8;

/// Result of checking the standing assumptions on a model.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    /// Coefficient boundedness: every path finite at every node.
    pub h1_ok: bool,
    /// Weight symmetry: Q0, Q, R0, R, H0, H, Hhat symmetric nodewise.
    pub h2_ok: bool,
    /// Definiteness: Q0, Q PSD and R0, R uniformly positive definite.
    pub sa_ok: bool,
    /// Contraction smallness of the consistency-condition system.
    pub h3_ok: bool,
    /// Smallest eigenvalue of R0 and R over the grid.
    pub sa_margin: f64,
    /// Left side of the contraction inequality, 2*rho1 + 2*rho2.
    pub h3_lhs: f64,
    /// Right side of the contraction inequality (see ccfield).
    pub h3_rhs: f64,
    /// Human-readable violation records.
    pub details: Vec<String>,
}

impl Model {
    /// Loads a scenario file (JSON; see the crate README for the schema).
    pub fn load_scenario(path: impl AsRef<Path>) -> Result<Model> {
        Self::load_scenario_with_steps(path, None)
    }

    /// Loads a scenario file, optionally overriding the grid resolution.
    ///
    /// Coefficients given per-node in the file must match the overridden
    /// node count; constants broadcast to any grid.
    pub fn load_scenario_with_steps(
        path: impl AsRef<Path>,
        steps_override: Option<usize>,
    ) -> Result<Model> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&value, steps_override)
    }

    /// Builds a model from an already parsed scenario document.
    pub fn from_json(value: &Value, steps_override: Option<usize>) -> Result<Model> {
        let obj = value
            .as_object()
            .ok_or_else(|| scenario_err("scenario", "top level must be a JSON object"))?;

        let n = get_usize(obj, "n")?;
        let m = get_usize(obj, "m")?;
        let n_minor = get_usize(obj, "N")?;
        if n == 0 || m == 0 || n_minor == 0 {
            return Err(scenario_err("n/m/N", "dimensions must be >= 1"));
        }
        let horizon = get_f64(obj, "T")?;
        let steps = match steps_override {
            Some(s) => s,
            None => get_usize(obj, "steps")?,
        };
        let grid = TimeGrid::new(horizon, steps)?;
        let nodes = grid.n_nodes();

        let xi0 = get_vector(obj, "xi0", n)?;
        let xi = get_vector(obj, "xi", n)?;

        let major_obj = obj
            .get("major")
            .and_then(Value::as_object)
            .ok_or_else(|| scenario_err("major", "missing coefficient object"))?;
        let minor_obj = obj
            .get("minor")
            .and_then(Value::as_object)
            .ok_or_else(|| scenario_err("minor", "missing coefficient object"))?;

        let mat = |o: &serde_json::Map<String, Value>,
                   key: &str,
                   rows: usize,
                   cols: usize,
                   required: bool|
         -> Result<CoefficientPath> {
            match o.get(key) {
                None | Some(Value::Null) => {
                    if required {
                        Err(scenario_err(key, "required cost matrix is missing"))
                    } else {
                        Ok(CoefficientPath::zeros(rows, cols, nodes))
                    }
                }
                Some(v) => parse_matrix(v, key, rows, cols, nodes),
            }
        };

        let major = MajorCoeffs {
            a0: mat(major_obj, "A0", n, n, false)?,
            b0: mat(major_obj, "B0", n, m, false)?,
            c0: mat(major_obj, "C0", n, n, false)?,
            d0: mat(major_obj, "D0", n, m, false)?,
            f0: mat(major_obj, "F0", n, n, false)?,
            ftilde0: mat(major_obj, "Ftilde0", n, n, false)?,
            q0: mat(major_obj, "Q0", n, n, true)?,
            h0: mat(major_obj, "H0", n, n, true)?,
            r0: mat(major_obj, "R0", m, m, true)?,
        };
        let minor = MinorCoeffs {
            a: mat(minor_obj, "A", n, n, false)?,
            b: mat(minor_obj, "B", n, m, false)?,
            c: mat(minor_obj, "C", n, n, false)?,
            d: mat(minor_obj, "D", n, m, false)?,
            f: mat(minor_obj, "F", n, n, false)?,
            ftilde: mat(minor_obj, "Ftilde", n, n, false)?,
            gtilde: mat(minor_obj, "Gtilde", n, n, false)?,
            q: mat(minor_obj, "Q", n, n, true)?,
            h: mat(minor_obj, "H", n, n, true)?,
            hhat: mat(minor_obj, "Hhat", n, n, true)?,
            r: mat(minor_obj, "R", m, m, true)?,
        };

        let model = Model {
            n,
            m,
            n_minor,
            grid,
            xi0,
            xi,
            major,
            minor,
        };
        model.check_well_formed()?;
        Ok(model)
    }

    /// Serializes the model back into the scenario document format.
    ///
    /// Constants stay constants and per-node paths stay per-node, so a
    /// load/save/load round trip reproduces identical values bit-for-bit.
    pub fn to_json(&self) -> Value {
        let mut major = BTreeMap::new();
        major.insert("A0", matrix_to_json(&self.major.a0));
        major.insert("B0", matrix_to_json(&self.major.b0));
        major.insert("C0", matrix_to_json(&self.major.c0));
        major.insert("D0", matrix_to_json(&self.major.d0));
        major.insert("F0", matrix_to_json(&self.major.f0));
        major.insert("Ftilde0", matrix_to_json(&self.major.ftilde0));
        major.insert("Q0", matrix_to_json(&self.major.q0));
        major.insert("H0", matrix_to_json(&self.major.h0));
        major.insert("R0", matrix_to_json(&self.major.r0));
        let mut minor = BTreeMap::new();
        minor.insert("A", matrix_to_json(&self.minor.a));
        minor.insert("B", matrix_to_json(&self.minor.b));
        minor.insert("C", matrix_to_json(&self.minor.c));
        minor.insert("D", matrix_to_json(&self.minor.d));
        minor.insert("F", matrix_to_json(&self.minor.f));
        minor.insert("Ftilde", matrix_to_json(&self.minor.ftilde));
        minor.insert("Gtilde", matrix_to_json(&self.minor.gtilde));
        minor.insert("Q", matrix_to_json(&self.minor.q));
        minor.insert("H", matrix_to_json(&self.minor.h));
        minor.insert("Hhat", matrix_to_json(&self.minor.hhat));
        minor.insert("R", matrix_to_json(&self.minor.r));
        json!({
            "n": self.n,
            "m": self.m,
            "N": self.n_minor,
            "T": self.grid.horizon(),
            "steps": self.grid.steps(),
            "xi0": self.xi0.iter().copied().collect::<Vec<f64>>(),
            "xi": self.xi.iter().copied().collect::<Vec<f64>>(),
            "major": major,
            "minor": minor,
        })
    }

    /// Writes the scenario document to a file.
    pub fn save_scenario(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_json()).expect("serialization");
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Shape and finiteness sanity (independent of the assumption report).
    fn check_well_formed(&self) -> Result<()> {
        let nodes = self.grid.n_nodes();
        let all = self.coefficient_paths();
        for (name, p) in &all {
            if p.n_nodes() != nodes {
                return Err(Error::GridMismatch(format!(
                    "{name} has {} nodes, grid has {nodes}",
                    p.n_nodes()
                )));
            }
        }
        if self.xi0.len() != self.n || self.xi.len() != self.n {
            return Err(Error::Shape {
                name: "xi0/xi".into(),
                expected: format!("length {}", self.n),
                got: format!("{}/{}", self.xi0.len(), self.xi.len()),
            });
        }
        Ok(())
    }

    /// All coefficient paths with their scenario names.
    pub fn coefficient_paths(&self) -> Vec<(&'static str, &CoefficientPath)> {
        vec![
            ("A0", &self.major.a0),
            ("B0", &self.major.b0),
            ("C0", &self.major.c0),
            ("D0", &self.major.d0),
            ("F0", &self.major.f0),
            ("Ftilde0", &self.major.ftilde0),
            ("Q0", &self.major.q0),
            ("H0", &self.major.h0),
            ("R0", &self.major.r0),
            ("A", &self.minor.a),
            ("B", &self.minor.b),
            ("C", &self.minor.c),
            ("D", &self.minor.d),
            ("F", &self.minor.f),
            ("Ftilde", &self.minor.ftilde),
            ("Gtilde", &self.minor.gtilde),
            ("Q", &self.minor.q),
            ("H", &self.minor.h),
            ("Hhat", &self.minor.hhat),
            ("R", &self.minor.r),
        ]
    }
}

/// Checks the standing assumptions: coefficient boundedness, weight symmetry,
/// cost definiteness, and the consistency-condition contraction inequality.
///
/// The contraction fields require the Riccati solutions and the stacked
/// system; when the prerequisite checks fail (or a Riccati solve fails), the
/// contraction fields are reported as NaN with `h3_ok = false` and a detail
/// record.
pub fn validate_assumptions(model: &Model, psd_tol: f64) -> AssumptionReport {
    let mut details = Vec::new();

    // Boundedness: every coefficient finite at every node.
    let mut h1_ok = true;
    for (name, p) in model.coefficient_paths() {
        if !p.all_finite() {
            h1_ok = false;
            details.push(format!("{name} has non-finite entries"));
        }
    }
    if !model.xi0.iter().all(|x| x.is_finite()) || !model.xi.iter().all(|x| x.is_finite()) {
        h1_ok = false;
        details.push("initial states have non-finite entries".into());
    }

    // Symmetry of all weight and tracking matrices.
    let mut h2_ok = true;
    let sym_named: [(&str, &CoefficientPath); 7] = [
        ("Q0", &model.major.q0),
        ("H0", &model.major.h0),
        ("R0", &model.major.r0),
        ("Q", &model.minor.q),
        ("H", &model.minor.h),
        ("Hhat", &model.minor.hhat),
        ("R", &model.minor.r),
    ];
    for (name, p) in sym_named {
        let mut worst = 0.0f64;
        for k in 0..p.n_nodes() {
            let m = p.at(k);
            worst = worst.max((m - m.transpose()).abs().max());
            if p.is_constant() {
                break;
            }
        }
        if worst > 1e-12 {
            h2_ok = false;
            details.push(format!("{name} asymmetric (max |M - M'| = {worst:.3e})"));
        }
    }

    // Definiteness: Q0, Q PSD; R0, R uniformly positive definite.
    let mut sa_ok = h2_ok;
    for (name, p) in [("Q0", &model.major.q0), ("Q", &model.minor.q)] {
        let lo = min_eig_over_grid(p);
        if lo < -psd_tol {
            sa_ok = false;
            details.push(format!("{name} not PSD (min eigenvalue {lo:.3e})"));
        }
    }
    let r0_lo = min_eig_over_grid(&model.major.r0);
    let r_lo = min_eig_over_grid(&model.minor.r);
    let sa_margin = r0_lo.min(r_lo);
    if r0_lo <= PD_TOL {
        sa_ok = false;
        details.push(format!("R0 not uniformly positive (min eigenvalue {r0_lo:.3e})"));
    }
    if r_lo <= PD_TOL {
        sa_ok = false;
        details.push(format!("R not uniformly positive (min eigenvalue {r_lo:.3e})"));
    }

    // Contraction inequality of the consistency-condition system. Needs the
    // Riccati solutions; only meaningful when the basic assumptions hold.
    let (mut h3_ok, mut h3_lhs, mut h3_rhs) = (false, f64::NAN, f64::NAN);
    if h1_ok && sa_ok {
        match contraction_fields(model) {
            Ok((lhs, rhs)) => {
                h3_lhs = lhs;
                h3_rhs = rhs;
                h3_ok = lhs < rhs;
            }
            Err(e) => details.push(format!("contraction check unavailable: {e}")),
        }
    } else {
        details.push("contraction check skipped (prerequisite assumptions failed)".into());
    }

    AssumptionReport {
        h1_ok,
        h2_ok,
        sa_ok,
        h3_ok,
        sa_margin,
        h3_lhs,
        h3_rhs,
        details,
    }
}

fn contraction_fields(model: &Model) -> Result<(f64, f64)> {
    let p_major = crate::riccati::solve_major_riccati(model)?;
    let p_minor = crate::riccati::solve_minor_riccati(model)?;
    let cc = crate::ccfield::assemble_stacked(model, &p_major, &p_minor)?;
    let report = crate::ccfield::contraction_report(&cc, 0.0, [1.0; 6]);
    Ok((report.h3_lhs, report.h3_rhs))
}

fn min_eig_over_grid(p: &CoefficientPath) -> f64 {
    let mut lo = f64::INFINITY;
    for k in 0..p.n_nodes() {
        lo = lo.min(linalg::min_sym_eigenvalue(p.at(k)));
        if p.is_constant() {
            break;
        }
    }
    lo
}

fn scenario_err(name: &str, message: &str) -> Error {
    Error::Scenario {
        name: name.into(),
        message: message.into(),
    }
}

fn get_usize(obj: &serde_json::Map<String, Value>, key: &str) -> Result<usize> {
    obj.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| scenario_err(key, "missing or not a nonnegative integer"))
}

fn get_f64(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64> {
    obj.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| scenario_err(key, "missing or not a number"))
}

fn get_vector(obj: &serde_json::Map<String, Value>, key: &str, n: usize) -> Result<DVector<f64>> {
    let arr = obj
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| scenario_err(key, "missing or not an array"))?;
    if arr.len() != n {
        return Err(Error::Shape {
            name: key.into(),
            expected: format!("length {n}"),
            got: format!("length {}", arr.len()),
        });
    }
    let mut v = DVector::zeros(n);
    for (i, x) in arr.iter().enumerate() {
        v[i] = x
            .as_f64()
            .ok_or_else(|| scenario_err(key, "vector entries must be numbers"))?;
    }
    Ok(v)
}

/// Parses one matrix entry: a number (1x1), a nested row-major array
/// (constant matrix), an array of per-node scalars (1x1 path of length
/// nodes), or an array of per-node nested matrices.
fn parse_matrix(
    v: &Value,
    name: &str,
    rows: usize,
    cols: usize,
    nodes: usize,
) -> Result<CoefficientPath> {
    match v {
        Value::Number(_) => {
            let x = v.as_f64().unwrap();
            require_shape(name, rows, cols, 1, 1)?;
            Ok(CoefficientPath::constant(DMatrix::from_element(1, 1, x), nodes))
        }
        Value::Array(items) if items.iter().all(Value::is_number) => {
            // Flat number list: only valid as a per-node scalar path.
            if rows == 1 && cols == 1 && items.len() == nodes {
                let mats = items
                    .iter()
                    .map(|x| DMatrix::from_element(1, 1, x.as_f64().unwrap()))
                    .collect();
                CoefficientPath::from_nodes(mats, name)
            } else {
                Err(scenario_err(
                    name,
                    "flat number list is only valid as a per-node scalar path of length steps+1; \
                     matrices must be nested arrays",
                ))
            }
        }
        Value::Array(items) => {
            // Try the constant-matrix reading first; if its shape does not
            // match and the outer length equals the node count, fall back to
            // the per-node reading.
            if let Ok(m) = parse_dense(v, name) {
                if m.nrows() == rows && m.ncols() == cols {
                    return Ok(CoefficientPath::constant(m, nodes));
                }
                if items.len() != nodes {
                    return Err(Error::Shape {
                        name: name.into(),
                        expected: format!("{rows}x{cols}"),
                        got: format!("{}x{}", m.nrows(), m.ncols()),
                    });
                }
            }
            if items.len() != nodes {
                return Err(scenario_err(
                    name,
                    "per-node list length must equal steps+1",
                ));
            }
            let mut mats = Vec::with_capacity(items.len());
            for (k, item) in items.iter().enumerate() {
                let m = match item {
                    Value::Number(_) => DMatrix::from_element(1, 1, item.as_f64().unwrap()),
                    _ => parse_dense(item, &format!("{name}[{k}]"))?,
                };
                if m.nrows() != rows || m.ncols() != cols {
                    return Err(Error::Shape {
                        name: format!("{name}[{k}]"),
                        expected: format!("{rows}x{cols}"),
                        got: format!("{}x{}", m.nrows(), m.ncols()),
                    });
                }
                mats.push(m);
            }
            CoefficientPath::from_nodes(mats, name)
        }
        _ => Err(scenario_err(name, "matrix must be a number or nested array")),
    }
}

/// Parses a row-major nested array into a dense matrix.
fn parse_dense(v: &Value, name: &str) -> Result<DMatrix<f64>> {
    let rows = v
        .as_array()
        .ok_or_else(|| scenario_err(name, "expected nested array"))?;
    if rows.is_empty() {
        return Err(scenario_err(name, "matrix has no rows"));
    }
    let mut data = Vec::new();
    let mut ncols = None;
    for row in rows {
        let cells = row
            .as_array()
            .ok_or_else(|| scenario_err(name, "expected nested array of rows"))?;
        match ncols {
            None => ncols = Some(cells.len()),
            Some(c) if c != cells.len() => {
                return Err(scenario_err(name, "ragged rows in matrix"));
            }
            _ => {}
        }
        for cell in cells {
            data.push(
                cell.as_f64()
                    .ok_or_else(|| scenario_err(name, "matrix entries must be numbers"))?,
            );
        }
    }
    let ncols = ncols.unwrap();
    if ncols == 0 {
        return Err(scenario_err(name, "matrix has no columns"));
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}

fn require_shape(name: &str, rows: usize, cols: usize, got_r: usize, got_c: usize) -> Result<()> {
    if rows != got_r || cols != got_c {
        return Err(Error::Shape {
            name: name.into(),
            expected: format!("{rows}x{cols}"),
            got: format!("{got_r}x{got_c}"),
        });
    }
    Ok(())
}

fn matrix_to_json(p: &CoefficientPath) -> Value {
    let dense = |m: &DMatrix<f64>| -> Value {
        let rows: Vec<Value> = (0..m.nrows())
            .map(|i| {
                let row: Vec<Value> = (0..m.ncols()).map(|j| json!(m[(i, j)])).collect();
                Value::Array(row)
            })
            .collect();
        Value::Array(rows)
    };
    if p.is_constant() {
        dense(p.at(0))
    } else {
        Value::Array((0..p.n_nodes()).map(|k| dense(p.at(k))).collect())
    }
}
