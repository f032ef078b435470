//! Deterministic CSV emission.
//!
//! Output artifacts must be byte-identical across reruns, so formatting is
//! pinned down here: `f64` values use Rust's shortest round-trip formatting,
//! rows end with `\n`, and no locale or timestamp information is involved.

use std::fmt::Write as _;

use crate::grid::{CoefficientPath, TimeGrid};

/// Formats one f64 with shortest round-trip representation.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // Normalize -0.0 so algebraically identical runs cannot differ.
        "0".into()
    } else {
        format!("{x}")
    }
}

/// CSV for a matrix-valued path: columns `t,<prefix>_i_j` in row-major order.
pub fn matrix_path_csv(grid: &TimeGrid, path: &CoefficientPath, prefix: &str) -> String {
    let mut out = String::new();
    out.push('t');
    for i in 0..path.rows() {
        for j in 0..path.cols() {
            let _ = write!(out, ",{prefix}_{i}_{j}");
        }
    }
    out.push('\n');
    for k in 0..grid.n_nodes() {
        let _ = write!(out, "{}", fmt_f64(grid.time(k)));
        let m = path.at(k);
        for i in 0..path.rows() {
            for j in 0..path.cols() {
                let _ = write!(out, ",{}", fmt_f64(m[(i, j)]));
            }
        }
        out.push('\n');
    }
    out
}

/// CSV from explicit headers and numeric rows.
pub fn table_csv(headers: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    out.push_str(&headers.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), headers.len());
        let mut first = true;
        for x in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{}", fmt_f64(*x));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn matrix_csv_layout() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let path = CoefficientPath::constant(DMatrix::from_row_slice(1, 2, &[1.5, -2.0]), 3);
        let csv = matrix_path_csv(&grid, &path, "K");
        assert_eq!(csv, "t,K_0_0,K_0_1\n0,1.5,-2\n0.5,1.5,-2\n1,1.5,-2\n");
    }

    #[test]
    fn zero_is_normalized() {
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(0.25), "0.25");
    }

    #[test]
    fn shortest_roundtrip_is_exact() {
        let x = std::f64::consts::PI / 3.0;
        let s = fmt_f64(x);
        let back: f64 = s.parse().unwrap();
        assert_eq!(back.to_bits(), x.to_bits());
    }
}
