//! Assembly and solution of the stacked consistency-condition system that
//! determines the limiting feedforward strategies under partial information.
//!
//! The limiting problem couples a forward pair `X = (z0, z)` with a five-block
//! backward stack `Y`. Here z0 is the major state under its feedback-optimal
//! control, driven by the common noise W0, and z is a representative minor
//! state under the coalition's feedback-optimal control, driven by its own
//! noise W1, with coefficients depending on the conditional mean
//! `zhat = E[z | W0]`. The backward stack collects the adjoint responses of
//! the coalition cost (y0 against the major state, y1 per agent, y2 against
//! the population average) and the two feedforward states (phi for the major,
//! phi_minor for the coalition). Its dW0-integrands form the five-block
//! `Z1 = (beta0, beta10, beta2, zeta, eta)`; the only dW1-integrand is beta11
//! in row 1 of `Z2` (zero-based block rows throughout).
//!
//! In stacked form, with hats denoting conditional expectations given W0,
//!
//! ```text
//! dX = (fwd_x X + fwd_xbar Xh + fwd_y Y + fwd_z1 Z1) dt
//!    + (dw0_x X + dw0_xbar Xh + dw0_y Y + dw0_z1 Z1) dW0
//!    + (dw1_x X + dw1_xbar Xh + dw1_y Y + dw1_z1 Z1) dW1,     X(0) = init,
//! dY = (bwd_x X + bwd_xbar Xh + bwd_y Y + bwd_ybar Yh
//!       + bwd_z1 Z1 + bwd_z2 Z2 + bwd_z2bar Z2h) dt
//!    + Z1 dW0 + Z2 dW1,                                        Y(T) = 0.
//! ```
//!
//! The solution is affine in the pair (X, Xh):
//!
//! ```text
//! Y = K1 X + K2 Xh,   Z1 = M1 X + M2 Xh,   Z2 = N1 X + N2 Xh,
//! ```
//!
//! and two independent solvers compute the coefficient paths:
//!
//! * [`solve_cc_decoupling`] derives matched Riccati-type ODEs for (K1, K2)
//!   by Ito expansion of the ansatz, with the diffusion read-outs M obtained
//!   from linear node solves of the form `(I - K dw0_z1) M = K (...)`. The
//!   conditional reduction (taking E[. | W0] of the whole system) yields a
//!   third, independent ODE for `Kcond`; `Kcond = K1 + K2` must hold, and the
//!   largest nodewise defect of that identity (together with the conditional
//!   diffusion and dW1 read-outs) is stored as the field residual.
//! * [`solve_cc_picard`] iterates the fixed-point map that alternately closes
//!   the forward equation with the current field and re-solves the backward
//!   equation against that closed forward flow. Each pass integrates linear
//!   backward ODEs only, so the iteration mirrors the contraction argument
//!   that underpins well-posedness; per-iteration update sizes and ratios are
//!   logged.
//!
//! [`contraction_report`] evaluates the monotonicity/Lipschitz constants of
//! the stacked system (spectral norms, maximized over the grid) and the
//! smallness inequality built from them. [`sample_cc_paths`] runs an
//! Euler-Maruyama simulation of the closed system together with its
//! conditional companion and reconstructs every backward component, the two
//! feedforward controls, and the coalition source term along each path.
//!
//! One structural point deserves note: the minor feedforward pair
//! (phi_minor, eta) is adapted to the common noise while the minor state
//! carries its own independent Brownian motion, so the cross-variation that
//! would feed the dW0-integrand eta back into the minor's control vanishes.
//! Consequently `fwd_z1` has no phi_minor-row entry, `dw1_z1` is zero, and
//! the backward drift never reads eta: the eta block is produced and reported
//! but inert. The major's zeta feedback survives because the major state and
//! its feedforward share the common noise.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::exec::{self, ExecMode};
use crate::grid::{CoefficientPath, TimeGrid};
use crate::linalg;
use crate::model::Model;
use crate::riccati::{self, IntervalPoint, RiccatiSolution};
use crate::rng;
use crate::{Error, Result};

/// Condition-number ceiling for the nodewise algebraic solves; beyond it the
/// system is treated as having left the well-posed regime.
pub const COND_LIMIT: f64 = 1e12;

/// Coefficient blocks of the stacked forward-backward system on a time grid.
///
/// Shapes, with n the state dimension: the forward blocks acting on X/Xh are
/// 2n x 2n and those acting on Y/Z1 are 2n x 5n; the backward blocks acting
/// on X/Xh are 5n x 2n and those acting on Y/Z are 5n x 5n. The six read-out
/// maps at the bottom turn conditional components into the feedforward
/// controls and are m x n per node.
#[derive(Debug, Clone)]
pub struct StackedCC {
    /// State dimension of one agent.
    pub n: usize,
    /// Control dimension of one agent.
    pub m: usize,
    /// Grid shared by every block path.
    pub grid: TimeGrid,
    /// Forward initial value (major initial condition stacked on minor).
    pub init: DVector<f64>,
    /// Forward drift on X.
    pub fwd_x: CoefficientPath,
    /// Forward drift on Xh.
    pub fwd_xbar: CoefficientPath,
    /// Forward drift on Y.
    pub fwd_y: CoefficientPath,
    /// Forward drift on Z1.
    pub fwd_z1: CoefficientPath,
    /// Common-noise diffusion on X.
    pub dw0_x: CoefficientPath,
    /// Common-noise diffusion on Xh.
    pub dw0_xbar: CoefficientPath,
    /// Common-noise diffusion on Y.
    pub dw0_y: CoefficientPath,
    /// Common-noise diffusion on Z1.
    pub dw0_z1: CoefficientPath,
    /// Idiosyncratic diffusion on X.
    pub dw1_x: CoefficientPath,
    /// Idiosyncratic diffusion on Xh.
    pub dw1_xbar: CoefficientPath,
    /// Idiosyncratic diffusion on Y.
    pub dw1_y: CoefficientPath,
    /// Idiosyncratic diffusion on Z1 (identically zero; kept for symmetry).
    pub dw1_z1: CoefficientPath,
    /// Backward drift on X.
    pub bwd_x: CoefficientPath,
    /// Backward drift on Xh.
    pub bwd_xbar: CoefficientPath,
    /// Backward drift on Y.
    pub bwd_y: CoefficientPath,
    /// Backward drift on Yh.
    pub bwd_ybar: CoefficientPath,
    /// Backward drift on the dW0-integrand stack Z1.
    pub bwd_z1: CoefficientPath,
    /// Backward drift on the dW1-integrand stack Z2.
    pub bwd_z2: CoefficientPath,
    /// Backward drift on the conditional dW1-integrand stack Z2h.
    pub bwd_z2bar: CoefficientPath,
    /// Major feedforward read-out acting on phi.
    pub theta2_y: CoefficientPath,
    /// Major feedforward read-out acting on zeta.
    pub theta2_z1: CoefficientPath,
    /// Major feedforward read-out acting on zhat.
    pub theta2_xhat: CoefficientPath,
    /// Minor feedforward read-out acting on phi_minor.
    pub lambda2_y: CoefficientPath,
    /// Minor feedforward read-out acting on zhat.
    pub lambda2_xhat: CoefficientPath,
    /// Minor feedforward read-out acting on z0.
    pub lambda2_x0: CoefficientPath,
}

impl StackedCC {
    /// All-zero system of the given dimensions, for synthetic diagnostics.
    pub fn zero(n: usize, m: usize, grid: TimeGrid) -> Self {
        let nn = grid.n_nodes();
        let wx = 2 * n;
        let wy = 5 * n;
        StackedCC {
            n,
            m,
            grid,
            init: DVector::zeros(wx),
            fwd_x: CoefficientPath::zeros(wx, wx, nn),
            fwd_xbar: CoefficientPath::zeros(wx, wx, nn),
            fwd_y: CoefficientPath::zeros(wx, wy, nn),
            fwd_z1: CoefficientPath::zeros(wx, wy, nn),
            dw0_x: CoefficientPath::zeros(wx, wx, nn),
            dw0_xbar: CoefficientPath::zeros(wx, wx, nn),
            dw0_y: CoefficientPath::zeros(wx, wy, nn),
            dw0_z1: CoefficientPath::zeros(wx, wy, nn),
            dw1_x: CoefficientPath::zeros(wx, wx, nn),
            dw1_xbar: CoefficientPath::zeros(wx, wx, nn),
            dw1_y: CoefficientPath::zeros(wx, wy, nn),
            dw1_z1: CoefficientPath::zeros(wx, wy, nn),
            bwd_x: CoefficientPath::zeros(wy, wx, nn),
            bwd_xbar: CoefficientPath::zeros(wy, wx, nn),
            bwd_y: CoefficientPath::zeros(wy, wy, nn),
            bwd_ybar: CoefficientPath::zeros(wy, wy, nn),
            bwd_z1: CoefficientPath::zeros(wy, wy, nn),
            bwd_z2: CoefficientPath::zeros(wy, wy, nn),
            bwd_z2bar: CoefficientPath::zeros(wy, wy, nn),
            theta2_y: CoefficientPath::zeros(m, n, nn),
            theta2_z1: CoefficientPath::zeros(m, n, nn),
            theta2_xhat: CoefficientPath::zeros(m, n, nn),
            lambda2_y: CoefficientPath::zeros(m, n, nn),
            lambda2_xhat: CoefficientPath::zeros(m, n, nn),
            lambda2_x0: CoefficientPath::zeros(m, n, nn),
        }
    }

    fn expect_grid(&self, other: TimeGrid, what: &str) -> Result<()> {
        if self.grid != other {
            return Err(Error::GridMismatch(format!(
                "{what}: stacked system on {:?}, counterpart on {:?}",
                self.grid, other
            )));
        }
        Ok(())
    }
}

/// Copies an n x n block into block position (bi, bj) of a larger matrix.
fn set_block(dst: &mut DMatrix<f64>, n: usize, bi: usize, bj: usize, b: &DMatrix<f64>) {
    dst.view_mut((bi * n, bj * n), (n, n)).copy_from(b);
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// Builds the stacked coefficient blocks from the model and the two solved
/// Riccati equations.
///
/// All blocks follow from substituting the feedback-optimal controls into the
/// limiting dynamics and adjoint equations; the weighting inverses come from
/// the Riccati solutions, so no factorization is repeated here.
pub fn assemble_stacked(
    model: &Model,
    p_major: &RiccatiSolution,
    p_minor: &RiccatiSolution,
) -> Result<StackedCC> {
    if p_major.grid != model.grid || p_minor.grid != model.grid {
        return Err(Error::GridMismatch(format!(
            "stacked assembly: model on {:?}, Riccati solutions on {:?} and {:?}",
            model.grid, p_major.grid, p_minor.grid
        )));
    }
    let n = model.n;
    let grid = model.grid;
    let nn = grid.n_nodes();
    let eye = DMatrix::<f64>::identity(n, n);

    let mut out = StackedCC::zero(n, model.m, grid);
    let mut init = DVector::zeros(2 * n);
    init.rows_mut(0, n).copy_from(&model.xi0);
    init.rows_mut(n, n).copy_from(&model.xi);
    out.init = init;

    // One Vec of node matrices per block; converted to paths at the end.
    let mut nodes: Vec<Vec<DMatrix<f64>>> = (0..25).map(|_| Vec::with_capacity(nn)).collect();

    for k in 0..nn {
        let p0 = p_major.p.at(k);
        let th1 = p_major.gain.at(k);
        let r0i = p_major.r_inv.at(k);
        let p = p_minor.p.at(k);
        let la1 = p_minor.gain.at(k);
        let ri = p_minor.r_inv.at(k);

        let a0 = model.major.a0.at(k);
        let b0 = model.major.b0.at(k);
        let c0 = model.major.c0.at(k);
        let d0 = model.major.d0.at(k);
        let f0 = model.major.f0.at(k);
        let ft0 = model.major.ftilde0.at(k);
        let q0 = model.major.q0.at(k);
        let h0 = model.major.h0.at(k);
        let a = model.minor.a.at(k);
        let b = model.minor.b.at(k);
        let c = model.minor.c.at(k);
        let d = model.minor.d.at(k);
        let f = model.minor.f.at(k);
        let ft = model.minor.ftilde.at(k);
        let gt = model.minor.gtilde.at(k);
        let q = model.minor.q.at(k);
        let h = model.minor.h.at(k);
        let hh = model.minor.hhat.at(k);

        // Shared products.
        let xq0 = (p0 * b0 + c0.transpose() * p0 * d0) * r0i;
        let xq = (p * b + c.transpose() * p * d) * ri;
        let pf0t = p0 * ft0;
        let pft = p * ft;
        let pgt = p * gt;
        let b0_r0i = b0 * r0i;
        let d0_r0i = d0 * r0i;
        let b_ri = b * ri;
        let d_ri = d * ri;
        let d0t_pf0t = d0.transpose() * &pf0t;
        let dt_pft = d.transpose() * &pft;
        let dt_pgt = d.transpose() * &pgt;
        let cxq0 = &xq0 * d0.transpose() - c0.transpose();
        let cxq = &xq * d.transpose() - c.transpose();
        let qh = q * h;
        let htq = h.transpose() * q;
        let hhtq = hh.transpose() * q;
        let imhh = &eye - hh;

        let wx = 2 * n;
        let wy = 5 * n;
        let mut fwd_x = DMatrix::zeros(wx, wx);
        let mut fwd_xbar = DMatrix::zeros(wx, wx);
        let mut fwd_y = DMatrix::zeros(wx, wy);
        let mut fwd_z1 = DMatrix::zeros(wx, wy);
        let mut dw0_x = DMatrix::zeros(wx, wx);
        let mut dw0_xbar = DMatrix::zeros(wx, wx);
        let mut dw0_y = DMatrix::zeros(wx, wy);
        let mut dw0_z1 = DMatrix::zeros(wx, wy);
        let mut dw1_x = DMatrix::zeros(wx, wx);
        let mut dw1_xbar = DMatrix::zeros(wx, wx);
        let mut dw1_y = DMatrix::zeros(wx, wy);
        let dw1_z1 = DMatrix::zeros(wx, wy);
        let mut bwd_x = DMatrix::zeros(wy, wx);
        let mut bwd_xbar = DMatrix::zeros(wy, wx);
        let mut bwd_y = DMatrix::zeros(wy, wy);
        let mut bwd_ybar = DMatrix::zeros(wy, wy);
        let mut bwd_z1 = DMatrix::zeros(wy, wy);
        let mut bwd_z2 = DMatrix::zeros(wy, wy);
        let mut bwd_z2bar = DMatrix::zeros(wy, wy);

        // Forward drift.
        set_block(&mut fwd_x, n, 0, 0, &(a0 + b0 * th1));
        set_block(&mut fwd_x, n, 1, 0, &(-(&b_ri * &dt_pgt)));
        set_block(&mut fwd_x, n, 1, 1, &(a + b * la1));
        set_block(&mut fwd_xbar, n, 0, 1, &(f0 - &b0_r0i * &d0t_pf0t));
        set_block(&mut fwd_xbar, n, 1, 1, &(f - &b_ri * &dt_pft));
        set_block(&mut fwd_y, n, 0, 3, &(-(&b0_r0i * b0.transpose())));
        set_block(&mut fwd_y, n, 1, 4, &(-(&b_ri * b.transpose())));
        set_block(&mut fwd_z1, n, 0, 3, &(-(&b0_r0i * d0.transpose())));

        // Common-noise diffusion (only the major row carries dW0).
        set_block(&mut dw0_x, n, 0, 0, &(c0 + d0 * th1));
        set_block(&mut dw0_xbar, n, 0, 1, &(ft0 - &d0_r0i * &d0t_pf0t));
        set_block(&mut dw0_y, n, 0, 3, &(-(&d0_r0i * b0.transpose())));
        set_block(&mut dw0_z1, n, 0, 3, &(-(&d0_r0i * d0.transpose())));

        // Idiosyncratic diffusion (only the minor row carries dW1).
        set_block(&mut dw1_x, n, 1, 0, &(gt - &d_ri * &dt_pgt));
        set_block(&mut dw1_x, n, 1, 1, &(c + d * la1));
        set_block(&mut dw1_xbar, n, 1, 1, &(ft - &d_ri * &dt_pft));
        set_block(&mut dw1_y, n, 1, 4, &(-(&d_ri * b.transpose())));

        // Backward drift, X and Xh columns.
        set_block(&mut bwd_x, n, 0, 0, &(-(&htq * h)));
        set_block(&mut bwd_x, n, 1, 0, &qh);
        set_block(&mut bwd_x, n, 1, 1, &(-q));
        set_block(&mut bwd_x, n, 2, 0, &(-(&hhtq * h)));
        set_block(&mut bwd_x, n, 4, 0, &(&cxq * &pgt + &qh - &hhtq * h));
        set_block(&mut bwd_xbar, n, 0, 1, &(&htq * &imhh));
        set_block(&mut bwd_xbar, n, 1, 1, &(q * hh));
        set_block(&mut bwd_xbar, n, 2, 1, &(&hhtq * &imhh));
        set_block(&mut bwd_xbar, n, 3, 1, &(&cxq0 * &pf0t - p0 * f0 + q0 * h0));
        set_block(
            &mut bwd_xbar,
            n,
            4,
            1,
            &(&cxq * &pft - p * f + q * hh + &hhtq * &imhh),
        );

        // Backward drift, Y and Yh columns.
        set_block(&mut bwd_y, n, 0, 0, &(-a0.transpose()));
        set_block(&mut bwd_y, n, 1, 1, &(-a.transpose()));
        set_block(&mut bwd_y, n, 2, 0, &(-f0.transpose()));
        set_block(&mut bwd_y, n, 2, 2, &(-(a + f).transpose()));
        set_block(&mut bwd_y, n, 3, 3, &(&xq0 * b0.transpose() - a0.transpose()));
        set_block(&mut bwd_y, n, 4, 0, &(-f0.transpose()));
        set_block(&mut bwd_y, n, 4, 2, &(-f.transpose()));
        set_block(&mut bwd_y, n, 4, 4, &(&xq * b.transpose() - a.transpose()));
        set_block(&mut bwd_ybar, n, 2, 1, &(-f.transpose()));
        set_block(&mut bwd_ybar, n, 4, 1, &(-f.transpose()));

        // Backward drift, integrand columns. The eta column of bwd_z1 (block
        // row 4, column 4) stays empty: see the module notes.
        set_block(&mut bwd_z1, n, 0, 0, &(-c0.transpose()));
        set_block(&mut bwd_z1, n, 2, 0, &(-ft0.transpose()));
        set_block(&mut bwd_z1, n, 3, 3, &(&xq0 * d0.transpose() - c0.transpose()));
        set_block(&mut bwd_z1, n, 4, 0, &(-ft0.transpose()));
        set_block(&mut bwd_z2, n, 1, 1, &(-c.transpose()));
        set_block(&mut bwd_z2bar, n, 0, 1, &(-gt.transpose()));
        set_block(&mut bwd_z2bar, n, 2, 1, &(-ft.transpose()));
        set_block(&mut bwd_z2bar, n, 4, 1, &(-ft.transpose()));

        // Feedforward read-out maps.
        let theta2_y = -(r0i * b0.transpose());
        let theta2_z1 = -(r0i * d0.transpose());
        let theta2_xhat = -(r0i * &d0t_pf0t);
        let lambda2_y = -(ri * b.transpose());
        let lambda2_xhat = -(ri * &dt_pft);
        let lambda2_x0 = -(ri * &dt_pgt);

        for (slot, mat) in [
            fwd_x, fwd_xbar, fwd_y, fwd_z1, dw0_x, dw0_xbar, dw0_y, dw0_z1, dw1_x, dw1_xbar,
            dw1_y, dw1_z1, bwd_x, bwd_xbar, bwd_y, bwd_ybar, bwd_z1, bwd_z2, bwd_z2bar, theta2_y,
            theta2_z1, theta2_xhat, lambda2_y, lambda2_xhat, lambda2_x0,
        ]
        .into_iter()
        .enumerate()
        {
            nodes[slot].push(mat);
        }
    }

    let mut it = nodes.into_iter();
    let mut take = |name: &str| CoefficientPath::from_nodes(it.next().unwrap(), name);
    out.fwd_x = take("cc fwd_x")?;
    out.fwd_xbar = take("cc fwd_xbar")?;
    out.fwd_y = take("cc fwd_y")?;
    out.fwd_z1 = take("cc fwd_z1")?;
    out.dw0_x = take("cc dw0_x")?;
    out.dw0_xbar = take("cc dw0_xbar")?;
    out.dw0_y = take("cc dw0_y")?;
    out.dw0_z1 = take("cc dw0_z1")?;
    out.dw1_x = take("cc dw1_x")?;
    out.dw1_xbar = take("cc dw1_xbar")?;
    out.dw1_y = take("cc dw1_y")?;
    out.dw1_z1 = take("cc dw1_z1")?;
    out.bwd_x = take("cc bwd_x")?;
    out.bwd_xbar = take("cc bwd_xbar")?;
    out.bwd_y = take("cc bwd_y")?;
    out.bwd_ybar = take("cc bwd_ybar")?;
    out.bwd_z1 = take("cc bwd_z1")?;
    out.bwd_z2 = take("cc bwd_z2")?;
    out.bwd_z2bar = take("cc bwd_z2bar")?;
    out.theta2_y = take("cc theta2_y")?;
    out.theta2_z1 = take("cc theta2_z1")?;
    out.theta2_xhat = take("cc theta2_xhat")?;
    out.lambda2_y = take("cc lambda2_y")?;
    out.lambda2_xhat = take("cc lambda2_xhat")?;
    out.lambda2_x0 = take("cc lambda2_x0")?;
    Ok(out)
}

/// The nineteen coefficient blocks evaluated at one integration stage point.
struct Blocks {
    fx: DMatrix<f64>,
    fxb: DMatrix<f64>,
    fy: DMatrix<f64>,
    fz: DMatrix<f64>,
    c0x: DMatrix<f64>,
    c0xb: DMatrix<f64>,
    d0y: DMatrix<f64>,
    f0z: DMatrix<f64>,
    c1x: DMatrix<f64>,
    c1xb: DMatrix<f64>,
    d1y: DMatrix<f64>,
    f1z: DMatrix<f64>,
    bx: DMatrix<f64>,
    bxb: DMatrix<f64>,
    by: DMatrix<f64>,
    byb: DMatrix<f64>,
    bz1: DMatrix<f64>,
    bz2: DMatrix<f64>,
    bz2b: DMatrix<f64>,
}

fn blocks_at(cc: &StackedCC, k: usize, pt: IntervalPoint) -> Blocks {
    let g = |p: &CoefficientPath| riccati::path_at_point(p, k, pt);
    Blocks {
        fx: g(&cc.fwd_x),
        fxb: g(&cc.fwd_xbar),
        fy: g(&cc.fwd_y),
        fz: g(&cc.fwd_z1),
        c0x: g(&cc.dw0_x),
        c0xb: g(&cc.dw0_xbar),
        d0y: g(&cc.dw0_y),
        f0z: g(&cc.dw0_z1),
        c1x: g(&cc.dw1_x),
        c1xb: g(&cc.dw1_xbar),
        d1y: g(&cc.dw1_y),
        f1z: g(&cc.dw1_z1),
        bx: g(&cc.bwd_x),
        bxb: g(&cc.bwd_xbar),
        by: g(&cc.bwd_y),
        byb: g(&cc.bwd_ybar),
        bz1: g(&cc.bwd_z1),
        bz2: g(&cc.bwd_z2),
        bz2b: g(&cc.bwd_z2bar),
    }
}

fn blocks_at_node(cc: &StackedCC, k: usize) -> Blocks {
    Blocks {
        fx: cc.fwd_x.at(k).clone(),
        fxb: cc.fwd_xbar.at(k).clone(),
        fy: cc.fwd_y.at(k).clone(),
        fz: cc.fwd_z1.at(k).clone(),
        c0x: cc.dw0_x.at(k).clone(),
        c0xb: cc.dw0_xbar.at(k).clone(),
        d0y: cc.dw0_y.at(k).clone(),
        f0z: cc.dw0_z1.at(k).clone(),
        c1x: cc.dw1_x.at(k).clone(),
        c1xb: cc.dw1_xbar.at(k).clone(),
        d1y: cc.dw1_y.at(k).clone(),
        f1z: cc.dw1_z1.at(k).clone(),
        bx: cc.bwd_x.at(k).clone(),
        bxb: cc.bwd_xbar.at(k).clone(),
        by: cc.bwd_y.at(k).clone(),
        byb: cc.bwd_ybar.at(k).clone(),
        bz1: cc.bwd_z1.at(k).clone(),
        bz2: cc.bwd_z2.at(k).clone(),
        bz2b: cc.bwd_z2bar.at(k).clone(),
    }
}

/// Solves the dW0 diffusion-matching identity `(I - K f0z) M = K (cx + d0y K)`
/// for M at one node-level stage.
fn solve_m(
    bl: &Blocks,
    k_mat: &DMatrix<f64>,
    cx: &DMatrix<f64>,
    label: &str,
    node: usize,
) -> Result<DMatrix<f64>> {
    let dim = k_mat.nrows();
    let lhs = DMatrix::identity(dim, dim) - k_mat * &bl.f0z;
    let rhs = k_mat * (cx + &bl.d0y * k_mat);
    linalg::lu_solve_checked(&lhs, &rhs, label, node, COND_LIMIT)
}

/// Drift-matching derivatives of (K1, K2) at one stage.
fn field_derivs(
    bl: &Blocks,
    k1: &DMatrix<f64>,
    k2: &DMatrix<f64>,
    node: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let kp = k1 + k2;
    let cx_cond = &bl.c0x + &bl.c0xb;
    let m1 = solve_m(bl, k1, &bl.c0x, "cc pathwise diffusion match", node)?;
    let mp = solve_m(bl, &kp, &cx_cond, "cc conditional diffusion match", node)?;
    let m2 = &mp - &m1;
    let n1 = k1 * (&bl.c1x + &bl.d1y * k1 + &bl.f1z * &m1);
    let n2 = k1 * (&bl.c1xb + &bl.d1y * k2 + &bl.f1z * &m2);
    let np = &n1 + &n2;
    let phi1 = &bl.fx + &bl.fy * k1 + &bl.fz * &m1;
    let phi2 = &bl.fxb + &bl.fy * k2 + &bl.fz * &m2;
    let phip = &phi1 + &phi2;
    let d1 = &bl.bx + &bl.by * k1 + &bl.bz1 * &m1 + &bl.bz2 * &n1 - k1 * &phi1;
    let d2 = &bl.bxb + &bl.by * k2 + &bl.byb * &kp + &bl.bz1 * &m2 + &bl.bz2 * &n2
        + &bl.bz2b * &np
        - k1 * &phi2
        - k2 * &phip;
    Ok((d1, d2))
}

/// Derivative of the conditional-reduction coefficient Kcond at one stage.
/// The dW1 read-out still needs K1 (only the pathwise representation carries
/// a dW1-integrand), so the K1 path enters as data.
fn kcond_deriv(
    bl: &Blocks,
    kc: &DMatrix<f64>,
    k1: &DMatrix<f64>,
    node: usize,
) -> Result<DMatrix<f64>> {
    let cx_cond = &bl.c0x + &bl.c0xb;
    let mc = solve_m(bl, kc, &cx_cond, "cc conditional diffusion match", node)?;
    let nc = k1 * (&bl.c1x + &bl.c1xb + &bl.d1y * kc + &bl.f1z * &mc);
    let phic = &bl.fx + &bl.fxb + &bl.fy * kc + &bl.fz * &mc;
    Ok(&bl.bx + &bl.bxb + (&bl.by + &bl.byb) * kc + &bl.bz1 * &mc + (&bl.bz2 + &bl.bz2b) * &nc
        - kc * &phic)
}

/// Affine representation of the backward stack and its integrands.
#[derive(Debug, Clone)]
pub struct DecouplingField {
    /// Grid shared by all coefficient paths.
    pub grid: TimeGrid,
    /// State dimension of one agent.
    pub n: usize,
    /// Y-coefficient on the pathwise state X, 5n x 2n, zero at T.
    pub k1: CoefficientPath,
    /// Y-coefficient on the conditional state Xh, 5n x 2n, zero at T.
    pub k2: CoefficientPath,
    /// Conditional-reduction coefficient; must reproduce K1 + K2.
    pub kcond: CoefficientPath,
    /// Z1-coefficient on X.
    pub m1: CoefficientPath,
    /// Z1-coefficient on Xh.
    pub m2: CoefficientPath,
    /// Z2-coefficient on X (beta11 row only is nonzero structurally).
    pub n1: CoefficientPath,
    /// Z2-coefficient on Xh.
    pub n2: CoefficientPath,
    /// Largest nodewise spectral-norm defect between the conditional
    /// reduction and the pathwise sum (coefficients with their diffusion and
    /// dW1 read-outs).
    pub residual: f64,
    /// True when every algebraic node solve stayed well conditioned (a
    /// singular solve aborts instead, so a returned field always has it set).
    pub nonsingular: bool,
}

/// Integrates the independent conditional ODE and derives the diffusion and
/// dW1 read-outs plus the consistency residual for a solved (K1, K2) pair.
fn finalize_field(cc: &StackedCC, k1: CoefficientPath, k2: CoefficientPath) -> Result<DecouplingField> {
    let grid = cc.grid;
    let n = cc.n;
    let nn = grid.n_nodes();
    let wy = 5 * n;
    let wx = 2 * n;

    let kcond = riccati::integrate_linear_matrix_ode(
        &grid,
        DMatrix::zeros(wy, wx),
        "cc conditional field",
        |k, pt, kc| {
            let bl = blocks_at(cc, k, pt);
            let k1s = riccati::path_at_point(&k1, k, pt);
            kcond_deriv(&bl, kc, &k1s, k)
        },
    )?;

    let mut m1n = Vec::with_capacity(nn);
    let mut m2n = Vec::with_capacity(nn);
    let mut n1n = Vec::with_capacity(nn);
    let mut n2n = Vec::with_capacity(nn);
    let mut residual = 0.0f64;
    for k in 0..nn {
        let bl = blocks_at_node(cc, k);
        let k1k = k1.at(k);
        let k2k = k2.at(k);
        let kp = k1k + k2k;
        let cx_cond = &bl.c0x + &bl.c0xb;
        let m1 = solve_m(&bl, k1k, &bl.c0x, "cc pathwise diffusion match", k)?;
        let mp = solve_m(&bl, &kp, &cx_cond, "cc conditional diffusion match", k)?;
        let m2 = &mp - &m1;
        let n1 = k1k * (&bl.c1x + &bl.d1y * k1k + &bl.f1z * &m1);
        let n2 = k1k * (&bl.c1xb + &bl.d1y * k2k + &bl.f1z * &m2);
        let np = &n1 + &n2;

        let kc = kcond.at(k);
        let mc = solve_m(&bl, kc, &cx_cond, "cc conditional diffusion match", k)?;
        let ncond = k1k * (&bl.c1x + &bl.c1xb + &bl.d1y * kc + &bl.f1z * &mc);
        residual = residual
            .max(linalg::spectral_norm(&(kc - &kp)))
            .max(linalg::spectral_norm(&(&mc - &mp)))
            .max(linalg::spectral_norm(&(&ncond - &np)));

        m1n.push(m1);
        m2n.push(m2);
        n1n.push(n1);
        n2n.push(n2);
    }

    Ok(DecouplingField {
        grid,
        n,
        k1,
        k2,
        kcond,
        m1: CoefficientPath::from_nodes(m1n, "cc M1")?,
        m2: CoefficientPath::from_nodes(m2n, "cc M2")?,
        n1: CoefficientPath::from_nodes(n1n, "cc N1")?,
        n2: CoefficientPath::from_nodes(n2n, "cc N2")?,
        residual,
        nonsingular: true,
    })
}

/// Solves the decoupling ODE system for (K1, K2) by one backward RK4 sweep of
/// the matched drift equations, then cross-checks against the independently
/// integrated conditional reduction.
pub fn solve_cc_decoupling(cc: &StackedCC, model: &Model) -> Result<DecouplingField> {
    cc.expect_grid(model.grid, "cc decoupling")?;
    let n = cc.n;
    let wy = 5 * n;
    let wx = 2 * n;
    let stacked = riccati::integrate_linear_matrix_ode(
        &cc.grid,
        DMatrix::zeros(wy, 2 * wx),
        "cc decoupling field",
        |k, pt, state| {
            let bl = blocks_at(cc, k, pt);
            let k1 = state.columns(0, wx).into_owned();
            let k2 = state.columns(wx, wx).into_owned();
            let (d1, d2) = field_derivs(&bl, &k1, &k2, k)?;
            Ok(hcat(&d1, &d2))
        },
    )?;
    let k1 = stacked.map(|m| m.columns(0, wx).into_owned());
    let k2 = stacked.map(|m| m.columns(wx, wx).into_owned());
    finalize_field(cc, k1, k2)
}

/// Per-iteration record of the fixed-point solver.
#[derive(Debug, Clone, Serialize)]
pub struct PicardLog {
    /// Sup-node update size after each iteration.
    pub deltas: Vec<f64>,
    /// Ratio of consecutive update sizes (empirical contraction factors).
    pub factors: Vec<f64>,
}

impl PicardLog {
    /// Latest empirical contraction factor, if two iterations happened.
    pub fn rate(&self) -> Option<f64> {
        self.factors.last().copied()
    }

    /// Largest empirical contraction factor observed.
    pub fn max_factor(&self) -> Option<f64> {
        self.factors.iter().copied().reduce(f64::max)
    }
}

/// Update-size ceiling for the fixed-point iteration. A sweep whose sup-node
/// change exceeds this is treated as divergence rather than iterated until
/// the integrator overflows; any field in a sane regime is orders of
/// magnitude below it.
const PICARD_DIVERGENCE_CAP: f64 = 1e8;

/// Signals fixed-point divergence with the evidence gathered so far.
fn picard_diverged(deltas: &[f64], factors: &[f64]) -> Error {
    Error::NoConvergence {
        iterations: deltas.len(),
        last_delta: deltas.last().copied().unwrap_or(f64::INFINITY),
        last_factor: factors.last().copied().unwrap_or(f64::INFINITY),
    }
}

/// Solves the consistency system by fixed-point iteration at the coefficient
/// level: the current field closes the forward equation, the backward
/// equation is re-solved against that closed flow by a linear RK4 sweep, and
/// the loop repeats until the sup-node update drops below `tol`.
pub fn solve_cc_picard(
    cc: &StackedCC,
    tol: f64,
    max_iter: usize,
) -> Result<(DecouplingField, PicardLog)> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Scenario {
            name: "picard".into(),
            message: format!("tol must be positive and max_iter nonzero, got {tol} / {max_iter}"),
        });
    }
    let grid = cc.grid;
    let n = cc.n;
    let nn = grid.n_nodes();
    let wy = 5 * n;
    let wx = 2 * n;

    let mut k1 = CoefficientPath::zeros(wy, wx, nn);
    let mut k2 = CoefficientPath::zeros(wy, wx, nn);
    let mut m1 = CoefficientPath::zeros(wy, wx, nn);
    let mut m2 = CoefficientPath::zeros(wy, wx, nn);
    let mut deltas: Vec<f64> = Vec::new();
    let mut factors: Vec<f64> = Vec::new();

    for _ in 0..max_iter {
        // Close the forward equation with the current field.
        let mut phi1n = Vec::with_capacity(nn);
        let mut phi2n = Vec::with_capacity(nn);
        let mut psi01n = Vec::with_capacity(nn);
        let mut psi02n = Vec::with_capacity(nn);
        let mut psi11n = Vec::with_capacity(nn);
        let mut psi12n = Vec::with_capacity(nn);
        for k in 0..nn {
            let k1k = k1.at(k);
            let k2k = k2.at(k);
            let m1k = m1.at(k);
            let m2k = m2.at(k);
            phi1n.push(cc.fwd_x.at(k) + cc.fwd_y.at(k) * k1k + cc.fwd_z1.at(k) * m1k);
            phi2n.push(cc.fwd_xbar.at(k) + cc.fwd_y.at(k) * k2k + cc.fwd_z1.at(k) * m2k);
            psi01n.push(cc.dw0_x.at(k) + cc.dw0_y.at(k) * k1k + cc.dw0_z1.at(k) * m1k);
            psi02n.push(cc.dw0_xbar.at(k) + cc.dw0_y.at(k) * k2k + cc.dw0_z1.at(k) * m2k);
            psi11n.push(cc.dw1_x.at(k) + cc.dw1_y.at(k) * k1k + cc.dw1_z1.at(k) * m1k);
            psi12n.push(cc.dw1_xbar.at(k) + cc.dw1_y.at(k) * k2k + cc.dw1_z1.at(k) * m2k);
        }
        let phi1 = CoefficientPath::from_nodes(phi1n, "cc picard phi1")?;
        let phi2 = CoefficientPath::from_nodes(phi2n, "cc picard phi2")?;
        let psi01 = CoefficientPath::from_nodes(psi01n, "cc picard psi01")?;
        let psi02 = CoefficientPath::from_nodes(psi02n, "cc picard psi02")?;
        let psi11 = CoefficientPath::from_nodes(psi11n, "cc picard psi11")?;
        let psi12 = CoefficientPath::from_nodes(psi12n, "cc picard psi12")?;

        // Re-solve the backward equation against the closed forward flow.
        // With the flow fixed, the new coefficients obey linear ODEs.
        let swept = riccati::integrate_linear_matrix_ode(
            &grid,
            DMatrix::zeros(wy, 2 * wx),
            "cc picard sweep",
            |k, pt, state| {
                let bl = blocks_at(cc, k, pt);
                let p1 = riccati::path_at_point(&phi1, k, pt);
                let p2 = riccati::path_at_point(&phi2, k, pt);
                let s01 = riccati::path_at_point(&psi01, k, pt);
                let s02 = riccati::path_at_point(&psi02, k, pt);
                let s11 = riccati::path_at_point(&psi11, k, pt);
                let s12 = riccati::path_at_point(&psi12, k, pt);
                let k1n = state.columns(0, wx).into_owned();
                let k2n = state.columns(wx, wx).into_owned();
                let m1n = &k1n * &s01;
                let m2n = &k1n * &s02 + &k2n * (&s01 + &s02);
                let n1n = &k1n * &s11;
                let n2n = &k1n * &s12;
                let d1 = &bl.bx + &bl.by * &k1n + &bl.bz1 * &m1n + &bl.bz2 * &n1n - &k1n * &p1;
                let d2 = &bl.bxb + &bl.by * &k2n + &bl.byb * (&k1n + &k2n) + &bl.bz1 * &m2n
                    + &bl.bz2 * &n2n
                    + &bl.bz2b * (&n1n + &n2n)
                    - &k1n * &p2
                    - &k2n * (&p1 + &p2);
                Ok(hcat(&d1, &d2))
            },
        );
        let swept = match swept {
            Ok(s) => s,
            // A sweep overflowing mid-integration is the blown-up tail of a
            // diverging iteration, not a standalone numerical fault.
            Err(Error::NonFinite { .. }) => return Err(picard_diverged(&deltas, &factors)),
            Err(e) => return Err(e),
        };
        let k1_new = swept.map(|m| m.columns(0, wx).into_owned());
        let k2_new = swept.map(|m| m.columns(wx, wx).into_owned());

        let mut delta = 0.0f64;
        for k in 0..nn {
            delta = delta.max(
                linalg::frob_diff(k1_new.at(k), k1.at(k)) + linalg::frob_diff(k2_new.at(k), k2.at(k)),
            );
        }
        if let Some(prev) = deltas.last() {
            if *prev > 0.0 {
                factors.push(delta / prev);
            }
        }
        deltas.push(delta);
        if !delta.is_finite() || delta > PICARD_DIVERGENCE_CAP {
            return Err(picard_diverged(&deltas, &factors));
        }

        // The new integrand coefficients pair the new K with the old closure.
        let mut m1n = Vec::with_capacity(nn);
        let mut m2n = Vec::with_capacity(nn);
        for k in 0..nn {
            let s01 = psi01.at(k);
            let s02 = psi02.at(k);
            m1n.push(k1_new.at(k) * s01);
            m2n.push(k1_new.at(k) * s02 + k2_new.at(k) * (s01 + s02));
        }
        k1 = k1_new;
        k2 = k2_new;
        m1 = CoefficientPath::from_nodes(m1n, "cc picard m1")?;
        m2 = CoefficientPath::from_nodes(m2n, "cc picard m2")?;

        if delta < tol {
            let field = finalize_field(cc, k1, k2)?;
            return Ok((field, PicardLog { deltas, factors }));
        }
    }

    Err(Error::NoConvergence {
        iterations: max_iter,
        last_delta: deltas.last().copied().unwrap_or(f64::NAN),
        last_factor: factors.last().copied().unwrap_or(f64::NAN),
    })
}

/// Monotonicity and Lipschitz constants of the stacked system, with the
/// discounted-norm margins and the smallness inequality built from them.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    /// Largest eigenvalue of the symmetric part of the forward X-drift block,
    /// maximized over the grid.
    pub rho1: f64,
    /// Same for the backward Y-drift block.
    pub rho2: f64,
    /// Block-norm constants k1..k12 (spectral norms, grid maxima): coupling
    /// norms of, in order, fwd_xbar, fwd_y, fwd_z1, bwd_x, bwd_xbar,
    /// bwd_ybar, the pathwise integrand couplings [bwd_z1 | bwd_z2], the
    /// conditional integrand coupling bwd_z2bar, dw0_x, dw0_xbar, dw0_y and
    /// dw0_z1.
    pub k: [f64; 12],
    /// Forward discounted-norm margin for the supplied rho and weights.
    pub rho_bar1: f64,
    /// Backward discounted-norm margin for the supplied rho and weights.
    pub rho_bar2: f64,
    /// Left side of the smallness inequality, `2 rho1 + 2 rho2`.
    pub h3_lhs: f64,
    /// Right side of the smallness inequality,
    /// `-2 k1 - 2 k6 - 2 k7^2 - 2 k8^2 - k9^2 - k10^2`.
    pub h3_rhs: f64,
    /// Whether the strict inequality `h3_lhs < h3_rhs` holds.
    pub h3_holds: bool,
    /// Empirical per-iteration contraction factor, filled in by callers from
    /// a Picard iteration log.
    pub picard_rate: Option<f64>,
}

/// Evaluates the contraction constants of the stacked system for a discount
/// rate `rho` and Young-inequality weights `l`.
pub fn contraction_report(cc: &StackedCC, rho: f64, l: [f64; 6]) -> ContractionReport {
    let rho1 = cc.fwd_x.sup_sym_eig();
    let rho2 = cc.bwd_y.sup_sym_eig();

    // The pathwise integrand coupling spans both noise channels, so its
    // constant is the norm of the concatenated block.
    let mut k7 = 0.0f64;
    for k in 0..cc.bwd_z1.n_nodes() {
        let cat = hcat(cc.bwd_z1.at(k), cc.bwd_z2.at(k));
        k7 = k7.max(linalg::spectral_norm(&cat));
        if cc.bwd_z1.is_constant() && cc.bwd_z2.is_constant() {
            break;
        }
    }

    let ks = [
        cc.fwd_xbar.sup_spectral_norm(),
        cc.fwd_y.sup_spectral_norm(),
        cc.fwd_z1.sup_spectral_norm(),
        cc.bwd_x.sup_spectral_norm(),
        cc.bwd_xbar.sup_spectral_norm(),
        cc.bwd_ybar.sup_spectral_norm(),
        k7,
        cc.bwd_z2bar.sup_spectral_norm(),
        cc.dw0_x.sup_spectral_norm(),
        cc.dw0_xbar.sup_spectral_norm(),
        cc.dw0_y.sup_spectral_norm(),
        cc.dw0_z1.sup_spectral_norm(),
    ];

    let rho_bar1 =
        rho - 2.0 * rho1 - 2.0 * ks[0] - ks[1] / l[0] - ks[2] / l[1] - ks[8] * ks[8] - ks[9] * ks[9];
    let rho_bar2 = -rho - 2.0 * rho2 - 2.0 * ks[5] - ks[3] / l[2] - ks[4] / l[3] - ks[6] / l[4]
        - ks[7] / l[5];
    let h3_lhs = 2.0 * rho1 + 2.0 * rho2;
    let h3_rhs = -2.0 * ks[0] - 2.0 * ks[5] - 2.0 * ks[6] * ks[6] - 2.0 * ks[7] * ks[7]
        - ks[8] * ks[8]
        - ks[9] * ks[9];

    ContractionReport {
        rho1,
        rho2,
        k: ks,
        rho_bar1,
        rho_bar2,
        h3_lhs,
        h3_rhs,
        h3_holds: h3_lhs < h3_rhs,
        picard_rate: None,
    }
}

/// One simulated trajectory of the closed system, sampled at every node.
///
/// Values are stored flat, row-major per node; the accessor methods slice out
/// one node. The z0-component of the conditional state equals z0 itself (z0
/// is adapted to the common noise), so it is not stored twice. The backward
/// stack and Z1 use the block order (y0, y1, y2, phi, phi_minor) and
/// (beta0, beta10, beta2, zeta, eta).
#[derive(Debug, Clone)]
pub struct CCPath {
    /// State dimension of one agent.
    pub n: usize,
    /// Control dimension of one agent.
    pub m: usize,
    /// Number of grid nodes.
    pub n_nodes: usize,
    /// Major state z0, n values per node.
    pub z0: Vec<f64>,
    /// Representative minor state z, n values per node.
    pub z: Vec<f64>,
    /// Conditional mean of z given the common noise, n values per node.
    pub zhat: Vec<f64>,
    /// Backward stack Y, 5n values per node.
    pub y: Vec<f64>,
    /// dW0-integrand stack Z1, 5n values per node.
    pub z1: Vec<f64>,
    /// dW1-integrand beta11, n values per node.
    pub beta11: Vec<f64>,
    /// Major feedforward control, m values per node.
    pub theta2: Vec<f64>,
    /// Minor feedforward control, m values per node.
    pub lambda2: Vec<f64>,
    /// Coalition source term, n values per node.
    pub s: Vec<f64>,
    /// Common-noise increments, one per interval.
    pub dw0: Vec<f64>,
    /// Idiosyncratic increments, one per interval.
    pub dw1: Vec<f64>,
}

impl CCPath {
    fn with_capacity(n: usize, m: usize, n_nodes: usize) -> Self {
        let steps = n_nodes - 1;
        CCPath {
            n,
            m,
            n_nodes,
            z0: Vec::with_capacity(n_nodes * n),
            z: Vec::with_capacity(n_nodes * n),
            zhat: Vec::with_capacity(n_nodes * n),
            y: Vec::with_capacity(n_nodes * 5 * n),
            z1: Vec::with_capacity(n_nodes * 5 * n),
            beta11: Vec::with_capacity(n_nodes * n),
            theta2: Vec::with_capacity(n_nodes * m),
            lambda2: Vec::with_capacity(n_nodes * m),
            s: Vec::with_capacity(n_nodes * n),
            dw0: Vec::with_capacity(steps),
            dw1: Vec::with_capacity(steps),
        }
    }

    /// Major state at node k.
    pub fn z0_at(&self, k: usize) -> &[f64] {
        &self.z0[k * self.n..(k + 1) * self.n]
    }

    /// Minor state at node k.
    pub fn z_at(&self, k: usize) -> &[f64] {
        &self.z[k * self.n..(k + 1) * self.n]
    }

    /// Conditional mean of the minor state at node k.
    pub fn zhat_at(&self, k: usize) -> &[f64] {
        &self.zhat[k * self.n..(k + 1) * self.n]
    }

    /// Backward stack at node k (5n values).
    pub fn y_at(&self, k: usize) -> &[f64] {
        let w = 5 * self.n;
        &self.y[k * w..(k + 1) * w]
    }

    /// dW0-integrand stack at node k (5n values).
    pub fn z1_at(&self, k: usize) -> &[f64] {
        let w = 5 * self.n;
        &self.z1[k * w..(k + 1) * w]
    }

    /// dW1-integrand at node k.
    pub fn beta11_at(&self, k: usize) -> &[f64] {
        &self.beta11[k * self.n..(k + 1) * self.n]
    }

    /// Major feedforward control at node k.
    pub fn theta2_at(&self, k: usize) -> &[f64] {
        &self.theta2[k * self.m..(k + 1) * self.m]
    }

    /// Minor feedforward control at node k.
    pub fn lambda2_at(&self, k: usize) -> &[f64] {
        &self.lambda2[k * self.m..(k + 1) * self.m]
    }

    /// Coalition source term at node k.
    pub fn s_at(&self, k: usize) -> &[f64] {
        &self.s[k * self.n..(k + 1) * self.n]
    }
}

/// Per-node sums and transposes shared by all sampled paths.
struct NodeAux {
    kc: DMatrix<f64>,
    mc: DMatrix<f64>,
    nc: DMatrix<f64>,
    fxs: DMatrix<f64>,
    c0xs: DMatrix<f64>,
    hhtq: DMatrix<f64>,
    f_t: DMatrix<f64>,
    ft_t: DMatrix<f64>,
    f0_t: DMatrix<f64>,
    ft0_t: DMatrix<f64>,
}

fn sample_aux(field: &DecouplingField, cc: &StackedCC, model: &Model) -> Vec<NodeAux> {
    (0..cc.grid.n_nodes())
        .map(|k| NodeAux {
            kc: field.k1.at(k) + field.k2.at(k),
            mc: field.m1.at(k) + field.m2.at(k),
            nc: field.n1.at(k) + field.n2.at(k),
            fxs: cc.fwd_x.at(k) + cc.fwd_xbar.at(k),
            c0xs: cc.dw0_x.at(k) + cc.dw0_xbar.at(k),
            hhtq: model.minor.hhat.at(k).transpose() * model.minor.q.at(k),
            f_t: model.minor.f.at(k).transpose(),
            ft_t: model.minor.ftilde.at(k).transpose(),
            f0_t: model.major.f0.at(k).transpose(),
            ft0_t: model.major.ftilde0.at(k).transpose(),
        })
        .collect()
}

fn check_sampling_grids(field: &DecouplingField, cc: &StackedCC, model: &Model) -> Result<()> {
    cc.expect_grid(model.grid, "cc sampling")?;
    cc.expect_grid(field.grid, "cc sampling field")
}

/// Advances the pathwise state one Euler step against a given conditional
/// state, returning the next pathwise state.
#[allow(clippy::too_many_arguments)]
fn euler_x_step(
    cc: &StackedCC,
    field: &DecouplingField,
    k: usize,
    x: &DVector<f64>,
    xh: &DVector<f64>,
    dt: f64,
    dw0: f64,
    dw1: f64,
) -> DVector<f64> {
    let y = field.k1.at(k) * x + field.k2.at(k) * xh;
    let z1 = field.m1.at(k) * x + field.m2.at(k) * xh;
    let drift = cc.fwd_x.at(k) * x + cc.fwd_xbar.at(k) * xh + cc.fwd_y.at(k) * &y
        + cc.fwd_z1.at(k) * &z1;
    let v0 = cc.dw0_x.at(k) * x + cc.dw0_xbar.at(k) * xh + cc.dw0_y.at(k) * &y
        + cc.dw0_z1.at(k) * &z1;
    let v1 = cc.dw1_x.at(k) * x + cc.dw1_xbar.at(k) * xh + cc.dw1_y.at(k) * &y
        + cc.dw1_z1.at(k) * &z1;
    x + drift * dt + v0 * dw0 + v1 * dw1
}

/// Advances the conditional state one Euler step (driven by W0 alone).
fn euler_xh_step(
    cc: &StackedCC,
    aux: &NodeAux,
    k: usize,
    xh: &DVector<f64>,
    dt: f64,
    dw0: f64,
) -> DVector<f64> {
    let yh = &aux.kc * xh;
    let z1h = &aux.mc * xh;
    let drift = &aux.fxs * xh + cc.fwd_y.at(k) * &yh + cc.fwd_z1.at(k) * &z1h;
    let v0 = &aux.c0xs * xh + cc.dw0_y.at(k) * &yh + cc.dw0_z1.at(k) * &z1h;
    xh + drift * dt + v0 * dw0
}

fn simulate_path(
    cc: &StackedCC,
    field: &DecouplingField,
    model: &Model,
    aux: &[NodeAux],
    seed: u64,
    path: usize,
) -> CCPath {
    let n = cc.n;
    let grid = cc.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut out = CCPath::with_capacity(n, cc.m, grid.n_nodes());

    let mut x = cc.init.clone();
    let mut zh = cc.init.rows(n, n).into_owned();
    for k in 0..=steps {
        let a = &aux[k];
        let mut xh = DVector::zeros(2 * n);
        xh.rows_mut(0, n).copy_from(&x.rows(0, n));
        xh.rows_mut(n, n).copy_from(&zh);

        let y = field.k1.at(k) * &x + field.k2.at(k) * &xh;
        let z1v = field.m1.at(k) * &x + field.m2.at(k) * &xh;
        let z2v = field.n1.at(k) * &x + field.n2.at(k) * &xh;
        let yh = &a.kc * &xh;
        let z1h = &a.mc * &xh;
        let z2h = &a.nc * &xh;

        let theta2 = cc.theta2_y.at(k) * yh.rows(3 * n, n) + cc.theta2_z1.at(k) * z1h.rows(3 * n, n)
            + cc.theta2_xhat.at(k) * &zh;
        let lambda2 = cc.lambda2_y.at(k) * yh.rows(4 * n, n) + cc.lambda2_xhat.at(k) * &zh
            + cc.lambda2_x0.at(k) * x.rows(0, n);

        let hz0 = model.minor.h.at(k) * x.rows(0, n);
        let hhz = model.minor.hhat.at(k) * &zh;
        let track = &zh - &hhz - &hz0;
        let s = model.minor.q.at(k) * (&hhz + &hz0) + &a.hhtq * &track
            - &a.f_t * yh.rows(2 * n, n)
            - &a.f_t * yh.rows(n, n)
            - &a.ft_t * z2h.rows(n, n)
            - &a.f0_t * yh.rows(0, n)
            - &a.ft0_t * z1h.rows(0, n);

        out.z0.extend_from_slice(&x.as_slice()[0..n]);
        out.z.extend_from_slice(&x.as_slice()[n..2 * n]);
        out.zhat.extend_from_slice(zh.as_slice());
        out.y.extend_from_slice(y.as_slice());
        out.z1.extend_from_slice(z1v.as_slice());
        out.beta11.extend_from_slice(&z2v.as_slice()[n..2 * n]);
        out.theta2.extend_from_slice(theta2.as_slice());
        out.lambda2.extend_from_slice(lambda2.as_slice());
        out.s.extend_from_slice(s.as_slice());

        if k == steps {
            break;
        }
        let dw0 = sq * rng::gaussian(seed, path as u64, k as u64, 0);
        let dw1 = sq * rng::gaussian(seed, path as u64, k as u64, 1);
        out.dw0.push(dw0);
        out.dw1.push(dw1);
        let xn = euler_x_step(cc, field, k, &x, &xh, dt, dw0, dw1);
        let xhn = euler_xh_step(cc, a, k, &xh, dt, dw0);
        zh = xhn.rows(n, n).into_owned();
        x = xn;
    }
    out
}

/// Euler-Maruyama simulation of the closed system: `paths` trajectories of
/// the pathwise state together with its conditional companion, with every
/// backward component reconstructed from the affine field.
///
/// Brownian increments come from the counter-based stream keyed by
/// (seed, path, node, channel), channel 0 being the common noise, so any
/// operation replaying the same key sees identical increments.
pub fn sample_cc_paths(
    field: &DecouplingField,
    cc: &StackedCC,
    model: &Model,
    paths: usize,
    seed: u64,
) -> Result<Vec<CCPath>> {
    check_sampling_grids(field, cc, model)?;
    let aux = sample_aux(field, cc, model);
    let out = exec::fold_paths(
        ExecMode::auto(),
        paths,
        Vec::new,
        |acc: &mut Vec<CCPath>, p| acc.push(simulate_path(cc, field, model, &aux, seed, p)),
        |mut a, b| {
            a.extend(b);
            a
        },
    );
    Ok(out)
}

/// Nodewise Monte Carlo moments of the minor state z.
#[derive(Debug, Clone)]
pub struct PathMoments {
    /// State dimension.
    pub n: usize,
    /// Number of grid nodes.
    pub n_nodes: usize,
    /// Paths averaged.
    pub paths: usize,
    /// Mean of z, n values per node.
    pub mean: Vec<f64>,
    /// Standard error of the mean, n values per node.
    pub stderr: Vec<f64>,
}

/// Streams `paths` simulated trajectories into nodewise mean and standard
/// error of the minor state, without retaining the paths.
pub fn sample_z_moments(
    field: &DecouplingField,
    cc: &StackedCC,
    model: &Model,
    paths: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<PathMoments> {
    check_sampling_grids(field, cc, model)?;
    if paths < 2 {
        return Err(Error::Scenario {
            name: "paths".into(),
            message: "moment estimation needs at least 2 paths".into(),
        });
    }
    let n = cc.n;
    let grid = cc.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let nn = grid.n_nodes();
    let aux = sample_aux(field, cc, model);

    let (sum, sumsq) = exec::fold_paths(
        mode,
        paths,
        || (vec![0.0f64; nn * n], vec![0.0f64; nn * n]),
        |acc: &mut (Vec<f64>, Vec<f64>), p| {
            let mut x = cc.init.clone();
            let mut zh = cc.init.rows(n, n).into_owned();
            for k in 0..=steps {
                for i in 0..n {
                    let v = x[n + i];
                    acc.0[k * n + i] += v;
                    acc.1[k * n + i] += v * v;
                }
                if k == steps {
                    break;
                }
                let mut xh = DVector::zeros(2 * n);
                xh.rows_mut(0, n).copy_from(&x.rows(0, n));
                xh.rows_mut(n, n).copy_from(&zh);
                let dw0 = sq * rng::gaussian(seed, p as u64, k as u64, 0);
                let dw1 = sq * rng::gaussian(seed, p as u64, k as u64, 1);
                let xn = euler_x_step(cc, field, k, &x, &xh, dt, dw0, dw1);
                let xhn = euler_xh_step(cc, &aux[k], k, &xh, dt, dw0);
                zh = xhn.rows(n, n).into_owned();
                x = xn;
            }
        },
        |mut a, b| {
            for (x, y) in a.0.iter_mut().zip(b.0) {
                *x += y;
            }
            for (x, y) in a.1.iter_mut().zip(b.1) {
                *x += y;
            }
            a
        },
    );

    let cnt = paths as f64;
    let mut mean = vec![0.0f64; nn * n];
    let mut stderr = vec![0.0f64; nn * n];
    for i in 0..nn * n {
        let m = sum[i] / cnt;
        let var = ((sumsq[i] - cnt * m * m) / (cnt - 1.0)).max(0.0);
        mean[i] = m;
        stderr[i] = (var / cnt).sqrt();
    }
    Ok(PathMoments {
        n,
        n_nodes: nn,
        paths,
        mean,
        stderr,
    })
}

/// Ensemble comparison of the conditional mean against an average over
/// idiosyncratic-noise copies sharing one common-noise path.
#[derive(Debug, Clone)]
pub struct ConditionalEnsemble {
    /// Nodes at which the comparison was taken.
    pub probe_nodes: Vec<usize>,
    /// Ensemble average of z per probe node.
    pub mean_z: Vec<DVector<f64>>,
    /// Conditional mean from the simulated companion per probe node.
    pub zhat: Vec<DVector<f64>>,
    /// Componentwise standard error of the ensemble average.
    pub stderr: Vec<DVector<f64>>,
}

/// Simulates one common-noise realization, then `copies` trajectories of the
/// minor state with independent idiosyncratic noise on top of it, and
/// compares the ensemble average of z with the conditional mean at the probe
/// nodes.
pub fn conditional_ensemble(
    field: &DecouplingField,
    cc: &StackedCC,
    model: &Model,
    copies: usize,
    seed: u64,
    probe_nodes: &[usize],
    mode: ExecMode,
) -> Result<ConditionalEnsemble> {
    check_sampling_grids(field, cc, model)?;
    let n = cc.n;
    let grid = cc.grid;
    let steps = grid.steps();
    let nn = grid.n_nodes();
    if copies < 2 {
        return Err(Error::Scenario {
            name: "copies".into(),
            message: "ensemble comparison needs at least 2 copies".into(),
        });
    }
    if let Some(bad) = probe_nodes.iter().find(|k| **k >= nn) {
        return Err(Error::Scenario {
            name: "probe_nodes".into(),
            message: format!("probe node {bad} outside grid with {nn} nodes"),
        });
    }
    let dt = grid.dt();
    let sq = dt.sqrt();
    let aux = sample_aux(field, cc, model);

    // One shared common-noise path drives the conditional companion; the
    // increments reuse path index 0 on channel 0.
    let dw0s: Vec<f64> = (0..steps)
        .map(|k| sq * rng::gaussian(seed, 0, k as u64, 0))
        .collect();
    let mut xh_nodes: Vec<DVector<f64>> = Vec::with_capacity(nn);
    {
        let mut xh = cc.init.clone();
        for k in 0..=steps {
            xh_nodes.push(xh.clone());
            if k == steps {
                break;
            }
            // The conditional z0-component coincides with the pathwise z0 of
            // a path driven by the same increments, so one recursion serves.
            xh = euler_xh_step(cc, &aux[k], k, &xh, dt, dw0s[k]);
        }
    }

    let np = probe_nodes.len();
    let (sum, sumsq) = exec::fold_paths(
        mode,
        copies,
        || (vec![0.0f64; np * n], vec![0.0f64; np * n]),
        |acc: &mut (Vec<f64>, Vec<f64>), j| {
            let mut x = cc.init.clone();
            for k in 0..=steps {
                if let Some(pi) = probe_nodes.iter().position(|p| *p == k) {
                    for i in 0..n {
                        let v = x[n + i];
                        acc.0[pi * n + i] += v;
                        acc.1[pi * n + i] += v * v;
                    }
                }
                if k == steps {
                    break;
                }
                let dw1 = sq * rng::gaussian(seed, j as u64, k as u64, 1);
                x = euler_x_step(cc, field, k, &x, &xh_nodes[k], dt, dw0s[k], dw1);
            }
        },
        |mut a, b| {
            for (x, y) in a.0.iter_mut().zip(b.0) {
                *x += y;
            }
            for (x, y) in a.1.iter_mut().zip(b.1) {
                *x += y;
            }
            a
        },
    );

    let cnt = copies as f64;
    let mut mean_z = Vec::with_capacity(np);
    let mut zhat = Vec::with_capacity(np);
    let mut stderr = Vec::with_capacity(np);
    for (pi, node) in probe_nodes.iter().enumerate() {
        let mut mv = DVector::zeros(n);
        let mut sv = DVector::zeros(n);
        for i in 0..n {
            let m = sum[pi * n + i] / cnt;
            let var = ((sumsq[pi * n + i] - cnt * m * m) / (cnt - 1.0)).max(0.0);
            mv[i] = m;
            sv[i] = (var / cnt).sqrt();
        }
        mean_z.push(mv);
        zhat.push(xh_nodes[*node].rows(n, n).into_owned());
        stderr.push(sv);
    }
    Ok(ConditionalEnsemble {
        probe_nodes: probe_nodes.to_vec(),
        mean_z,
        zhat,
        stderr,
    })
}

/// Closed conditional dynamics and feedforward read-out as plain per-node
/// matrices, for driving the deployed strategies along a realized
/// common-noise path without touching the stacked system again.
#[derive(Debug, Clone)]
pub struct ConditionalDriver {
    /// Grid shared with the field it was built from.
    pub grid: TimeGrid,
    /// State dimension of one agent.
    pub n: usize,
    /// Control dimension of one agent.
    pub m: usize,
    /// Initial conditional state (z0(0), zhat(0)).
    pub init: DVector<f64>,
    /// Drift matrix of the closed conditional state, 2n x 2n per node.
    pub drift: Vec<DMatrix<f64>>,
    /// Common-noise diffusion matrix of the closed conditional state.
    pub vol: Vec<DMatrix<f64>>,
    /// Major feedforward as a linear read-out of the conditional state,
    /// m x 2n per node.
    pub theta2: Vec<DMatrix<f64>>,
    /// Minor feedforward as a linear read-out of the conditional state.
    pub lambda2: Vec<DMatrix<f64>>,
}

/// Builds the closed conditional driver from a solved field.
pub fn conditional_driver(field: &DecouplingField, cc: &StackedCC) -> Result<ConditionalDriver> {
    cc.expect_grid(field.grid, "cc conditional driver")?;
    let n = cc.n;
    let m = cc.m;
    let nn = cc.grid.n_nodes();
    let mut drift = Vec::with_capacity(nn);
    let mut vol = Vec::with_capacity(nn);
    let mut theta2 = Vec::with_capacity(nn);
    let mut lambda2 = Vec::with_capacity(nn);
    for k in 0..nn {
        let kc = field.k1.at(k) + field.k2.at(k);
        let mc = field.m1.at(k) + field.m2.at(k);
        drift.push(cc.fwd_x.at(k) + cc.fwd_xbar.at(k) + cc.fwd_y.at(k) * &kc + cc.fwd_z1.at(k) * &mc);
        vol.push(cc.dw0_x.at(k) + cc.dw0_xbar.at(k) + cc.dw0_y.at(k) * &kc + cc.dw0_z1.at(k) * &mc);

        // Theta2 reads (phi, zeta, zhat); Lambda2 reads (phi_minor, zhat, z0).
        let mut th = cc.theta2_y.at(k) * kc.rows(3 * n, n) + cc.theta2_z1.at(k) * mc.rows(3 * n, n);
        let th_add = th.view((0, n), (m, n)) + cc.theta2_xhat.at(k);
        th.view_mut((0, n), (m, n)).copy_from(&th_add);
        theta2.push(th);
        let mut la = cc.lambda2_y.at(k) * kc.rows(4 * n, n);
        let la_add0 = la.view((0, 0), (m, n)) + cc.lambda2_x0.at(k);
        let la_add1 = la.view((0, n), (m, n)) + cc.lambda2_xhat.at(k);
        la.view_mut((0, 0), (m, n)).copy_from(&la_add0);
        la.view_mut((0, n), (m, n)).copy_from(&la_add1);
        lambda2.push(la);
    }
    Ok(ConditionalDriver {
        grid: cc.grid,
        n,
        m,
        init: cc.init.clone(),
        drift,
        vol,
        theta2,
        lambda2,
    })
}
