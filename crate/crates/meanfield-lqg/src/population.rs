//! Finite-population simulation and the small-population social-cost oracle.
//!
//! The limiting solves treat the minor population as a continuum.  This module
//! closes the loop in the other direction: it simulates one major agent and N
//! minor agents under a given strategy profile, prices the realized paths with
//! the per-agent quadratic costs, and cross-checks the result against a fully
//! stacked (N+1)-agent formulation assembled independently block by block.
//!
//! Simulation layout.  Every agent carries an n-dimensional state.  The major
//! follows dx0 = (A0 x0 + B0 u0 + F0 xavg) dt + (C0 x0 + D0 u0 + Ftilde0 xavg)
//! dW0 and minor i follows dxi = (A xi + B ui + F xavg) dt + (C xi + D ui +
//! Ftilde xavg + Gtilde x0) dWi, where xavg is the arithmetic mean of the
//! minor states recomputed at every node.  The scheme is Euler-Maruyama on the
//! shared grid.  Noise is drawn from the counter-based generator keyed by
//! (seed, path, node, channel) with channel 0 reserved for the common noise
//! and channel i for minor i; growing the population extends the channel list
//! without disturbing existing streams, so runs with different N are coupled
//! by construction (common random numbers).
//!
//! Strategy profiles.  The decentralized profile applies a feedback gain to
//! the agent's own state plus a feedforward that is adapted to the common
//! noise alone.  The feedforward is realized exactly as in the limiting
//! system: the closed conditional state of the decoupled field is co-simulated
//! along each path, driven by the same W0 increments as the population, and
//! the feedforwards are linear read-outs of that state.  A stacked-feedback
//! profile (full-state minor gains on the joined state vector) is also
//! supported at oracle scale; it is what the exact small-population optimum
//! produces.  Additive deterministic control offsets per agent express
//! perturbation directions.
//!
//! Social-cost oracle.  For capped N the joined system is assembled literally:
//! drift, control, per-channel diffusion loadings, the stacked control weight
//! with a zero major block, and the stacked state weight obtained by expanding
//! the summed minor costs.  An alternative block convention for the major row
//! of that weight (with N Q in the corner and untransposed tracking factors)
//! is carried alongside; the two disagree whenever tracking is active, so the
//! oracle reports the gap and always evaluates with the expansion-derived
//! form.  Costs can be priced three ways: per-agent on the per-agent
//! simulation, per-agent on the stacked simulation (pathwise agreement
//! validates the block assembly), and through the stacked quadratic form
//! (agreement validates the derived weight).
//!
//! Exact cost evaluation.  Closed under any affine profile, the joined state
//! together with the conditional feedforward state remains linear with
//! multiplicative noise, so its first and second moments obey matrix ODEs and
//! the expected cost is an additional scalar ODE state.  `oracle_cost_exact`
//! integrates these with RK4, giving a Monte-Carlo-free cost functional whose
//! central differences are exact directional derivatives of the quadratic
//! cost.  `frechet_gap` uses it to probe stationarity; `solve_stacked_optimum`
//! computes the true minimizer of the social cost over minor controls (with
//! the major loop closed) from the Riccati equation of the stacked system.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ccfield::{conditional_driver, ConditionalDriver, DecouplingField, StackedCC};
use crate::csvio::fmt_f64;
use crate::exec::{fold_paths, ExecMode};
use crate::grid::{CoefficientPath, TimeGrid};
use crate::linalg::{spd_factor, spectral_norm, sym_part};
use crate::model::Model;
use crate::riccati::{integrate_linear_matrix_ode, path_at_point, IntervalPoint, RiccatiSolution};
use crate::rng::gaussian;
use crate::{Error, Result};

/// Largest stacked population the oracle will assemble; the joined state has
/// (N+1)*n components and every node stores dense blocks.
pub const ORACLE_CAP: usize = 16;

/// Budget guard for simulation requests, in agent-steps
/// (agents * paths * steps).
pub const SIM_BUDGET: u64 = 1 << 28;

// ---------------------------------------------------------------------------
// strategy profiles
// ---------------------------------------------------------------------------

/// Deterministic additive control offset for one agent, an m x 1 path on the
/// shared grid.  Agent 0 is the major, agents 1..=N the minors.
#[derive(Debug, Clone)]
pub struct ControlOffset {
    /// Agent the offset applies to.
    pub agent: usize,
    /// Offset path, m x 1 per node.
    pub du: CoefficientPath,
}

/// Source of the common-noise-adapted feedforward terms.
#[derive(Debug, Clone)]
pub enum Feedforward {
    /// Pure feedback: no feedforward at all.
    None,
    /// Feedforwards read off the co-simulated conditional state of the
    /// decoupled field, driven by the population's own W0 increments.
    Conditional(ConditionalDriver),
}

/// A strategy for every agent in the population.
#[derive(Debug, Clone)]
pub enum StrategyProfile {
    /// Each agent feeds back on its own state; feedforwards are shared by all
    /// minors and adapted to the common noise.
    Decentralized {
        /// Major feedback gain, m x n per node.
        major_gain: CoefficientPath,
        /// Minor feedback gain, m x n per node, shared by all minors.
        minor_gain: CoefficientPath,
        /// Feedforward source.
        feedforward: Feedforward,
        /// Additive deterministic offsets.
        offsets: Vec<ControlOffset>,
    },
    /// The minor coalition feeds back on the full joined state (centralized
    /// information); the major keeps its own-state feedback.  Only valid for
    /// populations of exactly `n_agents` minors.
    StackedFeedback {
        /// Major feedback gain, m x n per node.
        major_gain: CoefficientPath,
        /// Joint minor gain, (N*m) x ((N+1)*n) per node.
        minor_gain_stacked: CoefficientPath,
        /// Additive deterministic offsets.
        offsets: Vec<ControlOffset>,
        /// Population size the stacked gain was built for.
        n_agents: usize,
    },
}

impl StrategyProfile {
    /// The equilibrium profile: Riccati feedback gains plus the conditional
    /// feedforward read-outs of the solved decoupled field.
    pub fn decentralized(
        p_major: &RiccatiSolution,
        p_minor: &RiccatiSolution,
        field: &DecouplingField,
        cc: &StackedCC,
    ) -> Result<Self> {
        let driver = conditional_driver(field, cc)?;
        if p_major.grid != driver.grid || p_minor.grid != driver.grid {
            return Err(Error::GridMismatch(
                "feedback gains and conditional driver share one grid".into(),
            ));
        }
        Ok(StrategyProfile::Decentralized {
            major_gain: p_major.gain.clone(),
            minor_gain: p_minor.gain.clone(),
            feedforward: Feedforward::Conditional(driver),
            offsets: Vec::new(),
        })
    }

    /// Feedback-only profile with no feedforward and no offsets.
    pub fn pure_feedback(major_gain: CoefficientPath, minor_gain: CoefficientPath) -> Self {
        StrategyProfile::Decentralized {
            major_gain,
            minor_gain,
            feedforward: Feedforward::None,
            offsets: Vec::new(),
        }
    }

    /// Returns the profile with one more additive offset.
    pub fn with_offset(mut self, off: ControlOffset) -> Self {
        self.offsets_mut().push(off);
        self
    }

    /// Returns the profile with every entry of `direction` appended after
    /// scaling by `h`.
    pub fn with_scaled_offsets(mut self, direction: &[ControlOffset], h: f64) -> Self {
        let offs = self.offsets_mut();
        for d in direction {
            offs.push(ControlOffset {
                agent: d.agent,
                du: d.du.scaled(h),
            });
        }
        self
    }

    fn offsets_mut(&mut self) -> &mut Vec<ControlOffset> {
        match self {
            StrategyProfile::Decentralized { offsets, .. } => offsets,
            StrategyProfile::StackedFeedback { offsets, .. } => offsets,
        }
    }

    /// The offsets carried by the profile.
    pub fn offsets(&self) -> &[ControlOffset] {
        match self {
            StrategyProfile::Decentralized { offsets, .. } => offsets,
            StrategyProfile::StackedFeedback { offsets, .. } => offsets,
        }
    }
}

// ---------------------------------------------------------------------------
// flat per-node coefficient storage
// ---------------------------------------------------------------------------

/// Copies a coefficient path into one row-major flat array per node.
pub(crate) fn flat_nodes(path: &CoefficientPath) -> Vec<Vec<f64>> {
    let (r, c) = (path.rows(), path.cols());
    (0..path.n_nodes())
        .map(|k| {
            let m = path.at(k);
            let mut v = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    v.push(m[(i, j)]);
                }
            }
            v
        })
        .collect()
}

/// y = A x for a row-major flat matrix with y.len() rows and x.len() columns.
#[inline]
pub(crate) fn mv_set(y: &mut [f64], a: &[f64], x: &[f64]) {
    let c = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (aij, xj) in a[i * c..(i + 1) * c].iter().zip(x) {
            acc += aij * xj;
        }
        *yi = acc;
    }
}

/// y += A x, same layout as `mv_set`.
#[inline]
pub(crate) fn mv_acc(y: &mut [f64], a: &[f64], x: &[f64]) {
    let c = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (aij, xj) in a[i * c..(i + 1) * c].iter().zip(x) {
            acc += aij * xj;
        }
        *yi += acc;
    }
}

/// x' Q x through a scratch buffer holding Q x.
#[inline]
pub(crate) fn quad_form(q: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
    mv_set(scratch, q, x);
    scratch.iter().zip(x).map(|(a, b)| a * b).sum()
}

enum GainFlats {
    Decentralized {
        g_major: Vec<Vec<f64>>,
        g_minor: Vec<Vec<f64>>,
        th2: Option<Vec<Vec<f64>>>,
        la2: Option<Vec<Vec<f64>>>,
    },
    Stacked {
        g_major: Vec<Vec<f64>>,
        g_minors: Vec<Vec<f64>>,
    },
}

/// Per-node flat form of a strategy profile: gains, feedforward read-outs,
/// conditional-state dynamics, and summed offsets.
struct ProfileFlats {
    n: usize,
    m: usize,
    n_agents: usize,
    gains: GainFlats,
    drv_drift: Option<Vec<Vec<f64>>>,
    drv_vol: Option<Vec<Vec<f64>>>,
    drv_init: Vec<f64>,
    /// Summed offsets per node, one (N+1)*m vector, or None when absent.
    off: Option<Vec<Vec<f64>>>,
}

impl ProfileFlats {
    fn new(profile: &StrategyProfile, model: &Model, n_agents: usize) -> Result<Self> {
        let (n, m) = (model.n, model.m);
        let nn = model.grid.n_nodes();
        if n_agents == 0 {
            return Err(Error::Invalid("population needs at least one minor".into()));
        }
        let check = |p: &CoefficientPath, r: usize, c: usize, name: &str| -> Result<()> {
            if p.rows() != r || p.cols() != c {
                return Err(Error::Shape {
                    name: name.into(),
                    expected: format!("{r}x{c}"),
                    got: format!("{}x{}", p.rows(), p.cols()),
                });
            }
            if p.n_nodes() != nn {
                return Err(Error::GridMismatch(format!(
                    "{name} has {} nodes, grid has {nn}",
                    p.n_nodes()
                )));
            }
            Ok(())
        };

        let offsets = profile.offsets();
        let off = if offsets.is_empty() {
            None
        } else {
            let mut sums = vec![vec![0.0; (n_agents + 1) * m]; nn];
            for o in offsets {
                if o.agent > n_agents {
                    return Err(Error::Invalid(format!(
                        "offset agent {} outside population 0..={n_agents}",
                        o.agent
                    )));
                }
                check(&o.du, m, 1, "control offset")?;
                for (k, node) in sums.iter_mut().enumerate() {
                    let du = o.du.at(k);
                    for c in 0..m {
                        node[o.agent * m + c] += du[(c, 0)];
                    }
                }
            }
            Some(sums)
        };

        let (gains, drv_drift, drv_vol, drv_init) = match profile {
            StrategyProfile::Decentralized {
                major_gain,
                minor_gain,
                feedforward,
                ..
            } => {
                check(major_gain, m, n, "major gain")?;
                check(minor_gain, m, n, "minor gain")?;
                match feedforward {
                    Feedforward::None => (
                        GainFlats::Decentralized {
                            g_major: flat_nodes(major_gain),
                            g_minor: flat_nodes(minor_gain),
                            th2: None,
                            la2: None,
                        },
                        None,
                        None,
                        vec![0.0; 2 * n],
                    ),
                    Feedforward::Conditional(drv) => {
                        if drv.grid != model.grid {
                            return Err(Error::GridMismatch(
                                "conditional driver grid differs from the model grid".into(),
                            ));
                        }
                        if drv.n != n || drv.m != m {
                            return Err(Error::Shape {
                                name: "conditional driver".into(),
                                expected: format!("n={n}, m={m}"),
                                got: format!("n={}, m={}", drv.n, drv.m),
                            });
                        }
                        let flat_vec = |ms: &Vec<DMatrix<f64>>| -> Vec<Vec<f64>> {
                            ms.iter()
                                .map(|mat| {
                                    let mut v = Vec::with_capacity(mat.nrows() * mat.ncols());
                                    for i in 0..mat.nrows() {
                                        for j in 0..mat.ncols() {
                                            v.push(mat[(i, j)]);
                                        }
                                    }
                                    v
                                })
                                .collect()
                        };
                        (
                            GainFlats::Decentralized {
                                g_major: flat_nodes(major_gain),
                                g_minor: flat_nodes(minor_gain),
                                th2: Some(flat_vec(&drv.theta2)),
                                la2: Some(flat_vec(&drv.lambda2)),
                            },
                            Some(flat_vec(&drv.drift)),
                            Some(flat_vec(&drv.vol)),
                            drv.init.iter().copied().collect(),
                        )
                    }
                }
            }
            StrategyProfile::StackedFeedback {
                major_gain,
                minor_gain_stacked,
                n_agents: profile_n,
                ..
            } => {
                if *profile_n != n_agents {
                    return Err(Error::Invalid(format!(
                        "stacked profile was built for N={profile_n}, population has N={n_agents}"
                    )));
                }
                check(major_gain, m, n, "major gain")?;
                check(
                    minor_gain_stacked,
                    n_agents * m,
                    (n_agents + 1) * n,
                    "stacked minor gain",
                )?;
                (
                    GainFlats::Stacked {
                        g_major: flat_nodes(major_gain),
                        g_minors: flat_nodes(minor_gain_stacked),
                    },
                    None,
                    None,
                    vec![0.0; 2 * n],
                )
            }
        };

        Ok(ProfileFlats {
            n,
            m,
            n_agents,
            gains,
            drv_drift,
            drv_vol,
            drv_init,
            off,
        })
    }

    /// Fills the (N+1)*m control vector at node `k` from the joined state `x`
    /// and conditional state `xh`.
    fn controls(&self, k: usize, x: &[f64], xh: &[f64], u: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        match &self.gains {
            GainFlats::Decentralized {
                g_major,
                g_minor,
                th2,
                la2,
            } => {
                mv_set(&mut u[..m], &g_major[k], &x[..n]);
                if let Some(t) = th2 {
                    mv_acc(&mut u[..m], &t[k], xh);
                }
                for i in 1..=self.n_agents {
                    let (us, ue) = (i * m, (i + 1) * m);
                    mv_set(&mut u[us..ue], &g_minor[k], &x[i * n..(i + 1) * n]);
                    if let Some(l) = la2 {
                        mv_acc(&mut u[us..ue], &l[k], xh);
                    }
                }
            }
            GainFlats::Stacked { g_major, g_minors } => {
                mv_set(&mut u[..m], &g_major[k], &x[..n]);
                mv_set(&mut u[m..], &g_minors[k], x);
            }
        }
        if let Some(off) = &self.off {
            for (ui, oi) in u.iter_mut().zip(&off[k]) {
                *ui += oi;
            }
        }
    }

    /// Minor feedforward at node `k` into `ff` (used by the limiting
    /// co-simulation); zero when the profile has none.
    fn minor_feedforward(&self, k: usize, xh: &[f64], ff: &mut [f64]) {
        match &self.gains {
            GainFlats::Decentralized { la2: Some(l), .. } => mv_set(ff, &l[k], xh),
            _ => ff.fill(0.0),
        }
    }

    /// One Euler step of the conditional feedforward state.
    fn step_xh(&self, k: usize, xh: &[f64], xhn: &mut [f64], dt: f64, dw0: f64, scratch: &mut [f64]) {
        match (&self.drv_drift, &self.drv_vol) {
            (Some(da), Some(dv)) => {
                mv_set(scratch, &da[k], xh);
                for (o, (xi, di)) in xhn.iter_mut().zip(xh.iter().zip(scratch.iter())) {
                    *o = xi + di * dt;
                }
                mv_set(scratch, &dv[k], xh);
                for (o, vi) in xhn.iter_mut().zip(scratch.iter()) {
                    *o += vi * dw0;
                }
            }
            _ => xhn.copy_from_slice(xh),
        }
    }
}

// ---------------------------------------------------------------------------
// population kernel
// ---------------------------------------------------------------------------

/// Everything observable at one time node along one simulated path.
pub struct PathState<'a> {
    /// Node index.
    pub k: usize,
    /// Joined state, (N+1)*n entries, agent-major.
    pub x: &'a [f64],
    /// Joined control, (N+1)*m entries.
    pub u: &'a [f64],
    /// Arithmetic mean of the minor states, n entries.
    pub xavg: &'a [f64],
    /// Co-simulated conditional state of the limiting system (z0, zhat),
    /// 2n entries; zero when the profile carries no conditional feedforward.
    pub xh: &'a [f64],
    /// Limiting minor states xbar_1..xbar_N driven by the same idiosyncratic
    /// noises, present only when requested from the kernel.
    pub xbar: Option<&'a [f64]>,
}

/// Reusable per-path simulator: model coefficients and the strategy profile
/// flattened to per-node arrays so the inner loop allocates nothing.
pub struct PopulationKernel {
    n: usize,
    m: usize,
    n_agents: usize,
    grid: TimeGrid,
    a0: Vec<Vec<f64>>,
    b0: Vec<Vec<f64>>,
    c0: Vec<Vec<f64>>,
    d0: Vec<Vec<f64>>,
    f0: Vec<Vec<f64>>,
    ft0: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    ft: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    init0: Vec<f64>,
    initm: Vec<f64>,
    prof: ProfileFlats,
    track_limit: bool,
    channel_map: Option<Vec<u64>>,
}

impl PopulationKernel {
    /// Builds the kernel for `n_agents` minors; `track_limit` additionally
    /// co-simulates the limiting minor states xbar_i (same gains and
    /// feedforward, mean-field couplings closed by the conditional state).
    pub fn new(
        model: &Model,
        profile: &StrategyProfile,
        n_agents: usize,
        track_limit: bool,
    ) -> Result<Self> {
        let prof = ProfileFlats::new(profile, model, n_agents)?;
        if track_limit && matches!(profile, StrategyProfile::StackedFeedback { .. }) {
            return Err(Error::Invalid(
                "limiting minor tracking needs a decentralized profile".into(),
            ));
        }
        Ok(PopulationKernel {
            n: model.n,
            m: model.m,
            n_agents,
            grid: model.grid,
            a0: flat_nodes(&model.major.a0),
            b0: flat_nodes(&model.major.b0),
            c0: flat_nodes(&model.major.c0),
            d0: flat_nodes(&model.major.d0),
            f0: flat_nodes(&model.major.f0),
            ft0: flat_nodes(&model.major.ftilde0),
            a: flat_nodes(&model.minor.a),
            b: flat_nodes(&model.minor.b),
            c: flat_nodes(&model.minor.c),
            d: flat_nodes(&model.minor.d),
            f: flat_nodes(&model.minor.f),
            ft: flat_nodes(&model.minor.ftilde),
            gt: flat_nodes(&model.minor.gtilde),
            init0: model.xi0.iter().copied().collect(),
            initm: model.xi.iter().copied().collect(),
            prof,
            track_limit,
            channel_map: None,
        })
    }

    /// Population size (number of minors).
    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Simulation grid.
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Remaps noise channels (testing hook for exchangeability checks):
    /// agent i draws from channel `map[i]` instead of channel i.
    #[cfg(test)]
    pub(crate) fn set_channel_map(&mut self, map: Vec<u64>) {
        assert_eq!(map.len(), self.n_agents + 1);
        self.channel_map = Some(map);
    }

    #[inline]
    fn channel(&self, agent: usize) -> u64 {
        match &self.channel_map {
            Some(map) => map[agent],
            None => agent as u64,
        }
    }

    /// Simulates one path, calling `observe` at every node (controls included)
    /// before the state is advanced.
    pub fn run_path<F: FnMut(&PathState)>(&self, seed: u64, path: usize, mut observe: F) {
        let (n, m, na) = (self.n, self.m, self.n_agents);
        let steps = self.grid.steps();
        let dt = self.grid.dt();
        let sq = dt.sqrt();

        let mut x = vec![0.0; (na + 1) * n];
        let mut u = vec![0.0; (na + 1) * m];
        let mut xavg = vec![0.0; n];
        let mut xh = self.prof.drv_init.clone();
        let mut xn = x.clone();
        let mut xhn = xh.clone();
        let mut xbar = vec![0.0; if self.track_limit { na * n } else { 0 }];
        let mut xbn = xbar.clone();
        let mut ub = vec![0.0; m];
        let mut ff = vec![0.0; m];
        let mut dr = vec![0.0; n];
        let mut vo = vec![0.0; n];
        let mut hbuf = vec![0.0; 2 * n];
        x[..n].copy_from_slice(&self.init0);
        for i in 1..=na {
            x[i * n..(i + 1) * n].copy_from_slice(&self.initm);
        }
        for i in 0..(xbar.len() / n.max(1)) {
            xbar[i * n..(i + 1) * n].copy_from_slice(&self.initm);
        }

        for k in 0..=steps {
            for comp in 0..n {
                let mut s = 0.0;
                for i in 1..=na {
                    s += x[i * n + comp];
                }
                xavg[comp] = s / na as f64;
            }
            self.prof.controls(k, &x, &xh, &mut u);
            observe(&PathState {
                k,
                x: &x,
                u: &u,
                xavg: &xavg,
                xh: &xh,
                xbar: if self.track_limit { Some(&xbar) } else { None },
            });
            if k == steps {
                break;
            }

            let (pk, kk) = (path as u64, k as u64);
            let dw0 = sq * gaussian(seed, pk, kk, self.channel(0));

            // Major state.
            mv_set(&mut dr, &self.a0[k], &x[..n]);
            mv_acc(&mut dr, &self.b0[k], &u[..m]);
            mv_acc(&mut dr, &self.f0[k], &xavg);
            mv_set(&mut vo, &self.c0[k], &x[..n]);
            mv_acc(&mut vo, &self.d0[k], &u[..m]);
            mv_acc(&mut vo, &self.ft0[k], &xavg);
            for comp in 0..n {
                xn[comp] = x[comp] + dr[comp] * dt + vo[comp] * dw0;
            }

            // Minor states, each on its own channel.
            for i in 1..=na {
                let dwi = sq * gaussian(seed, pk, kk, self.channel(i));
                let (xs, xe) = (i * n, (i + 1) * n);
                let (us, ue) = (i * m, (i + 1) * m);
                mv_set(&mut dr, &self.a[k], &x[xs..xe]);
                mv_acc(&mut dr, &self.b[k], &u[us..ue]);
                mv_acc(&mut dr, &self.f[k], &xavg);
                mv_set(&mut vo, &self.c[k], &x[xs..xe]);
                mv_acc(&mut vo, &self.d[k], &u[us..ue]);
                mv_acc(&mut vo, &self.ft[k], &xavg);
                mv_acc(&mut vo, &self.gt[k], &x[..n]);
                for comp in 0..n {
                    xn[xs + comp] = x[xs + comp] + dr[comp] * dt + vo[comp] * dwi;
                }

                if self.track_limit {
                    // Limiting copy: mean-field couplings closed by (z0, zhat),
                    // same gain, same feedforward, same idiosyncratic noise.
                    let (bs, be) = ((i - 1) * n, i * n);
                    let (z0h, zh) = (&xh[..n], &xh[n..2 * n]);
                    self.prof.minor_feedforward(k, &xh, &mut ff);
                    match &self.prof.gains {
                        GainFlats::Decentralized { g_minor, .. } => {
                            mv_set(&mut ub, &g_minor[k], &xbar[bs..be]);
                        }
                        GainFlats::Stacked { .. } => unreachable!(),
                    }
                    for (c_, f_) in ub.iter_mut().zip(ff.iter()) {
                        *c_ += f_;
                    }
                    mv_set(&mut dr, &self.a[k], &xbar[bs..be]);
                    mv_acc(&mut dr, &self.b[k], &ub);
                    mv_acc(&mut dr, &self.f[k], zh);
                    mv_set(&mut vo, &self.c[k], &xbar[bs..be]);
                    mv_acc(&mut vo, &self.d[k], &ub);
                    mv_acc(&mut vo, &self.ft[k], zh);
                    mv_acc(&mut vo, &self.gt[k], z0h);
                    for comp in 0..n {
                        xbn[bs + comp] = xbar[bs + comp] + dr[comp] * dt + vo[comp] * dwi;
                    }
                }
            }

            self.prof.step_xh(k, &xh, &mut xhn, dt, dw0, &mut hbuf);
            std::mem::swap(&mut x, &mut xn);
            std::mem::swap(&mut xh, &mut xhn);
            if self.track_limit {
                std::mem::swap(&mut xbar, &mut xbn);
            }
        }
    }

}

/// Checks the agent-steps budget before a simulation allocates anything.
pub(crate) fn check_budget(n_agents: usize, paths: usize, steps: usize) -> Result<()> {
    let requested = (n_agents as u64 + 1)
        .saturating_mul(paths as u64)
        .saturating_mul(steps as u64);
    if requested > SIM_BUDGET {
        return Err(Error::BudgetExceeded {
            requested,
            budget: SIM_BUDGET,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// population runs and costs
// ---------------------------------------------------------------------------

/// Stored trajectories of a finite-population simulation.  Layouts are flat
/// and row-major: states index as ((path * n_nodes + node) * (N+1) + agent) *
/// n + component, controls likewise with m, averages without the agent axis.
#[derive(Debug, Clone)]
pub struct PopulationRun {
    /// State dimension per agent.
    pub n: usize,
    /// Control dimension per agent.
    pub m: usize,
    /// Number of minors.
    pub n_agents: usize,
    /// Nodes per path.
    pub n_nodes: usize,
    /// Simulated paths.
    pub paths: usize,
    /// Seed the noise was keyed by.
    pub seed: u64,
    /// Simulation grid.
    pub grid: TimeGrid,
    /// Agent states at every node of every path.
    pub states: Vec<f64>,
    /// Agent controls at every node of every path.
    pub controls: Vec<f64>,
    /// Minor-state averages at every node of every path.
    pub averages: Vec<f64>,
}

impl PopulationRun {
    /// State of one agent at one node of one path.
    pub fn state(&self, path: usize, node: usize, agent: usize) -> &[f64] {
        let s = (((path * self.n_nodes) + node) * (self.n_agents + 1) + agent) * self.n;
        &self.states[s..s + self.n]
    }

    /// Control of one agent at one node of one path.
    pub fn control(&self, path: usize, node: usize, agent: usize) -> &[f64] {
        let s = (((path * self.n_nodes) + node) * (self.n_agents + 1) + agent) * self.m;
        &self.controls[s..s + self.m]
    }

    /// Minor-state average at one node of one path.
    pub fn average(&self, path: usize, node: usize) -> &[f64] {
        let s = ((path * self.n_nodes) + node) * self.n;
        &self.averages[s..s + self.n]
    }

    /// CSV export of the first `max_paths` trajectories: one row per
    /// (time, path, agent) with state and control components.
    pub fn trajectories_csv(&self, max_paths: usize) -> String {
        let mut out = String::from("t,path,agent");
        for c in 0..self.n {
            let _ = write!(out, ",x{c}");
        }
        for c in 0..self.m {
            let _ = write!(out, ",u{c}");
        }
        out.push('\n');
        for p in 0..self.paths.min(max_paths) {
            for k in 0..self.n_nodes {
                for agent in 0..=self.n_agents {
                    out.push_str(&fmt_f64(self.grid.time(k)));
                    let _ = write!(out, ",{p},{agent}");
                    for v in self.state(p, k, agent) {
                        out.push(',');
                        out.push_str(&fmt_f64(*v));
                    }
                    for v in self.control(p, k, agent) {
                        out.push(',');
                        out.push_str(&fmt_f64(*v));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

struct RunBlock {
    path: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    averages: Vec<f64>,
}

/// Simulates `paths` population paths under the profile, storing full
/// trajectories; execution mode is picked automatically.
pub fn simulate_population(
    model: &Model,
    profile: &StrategyProfile,
    n_agents: usize,
    paths: usize,
    seed: u64,
) -> Result<PopulationRun> {
    simulate_population_mode(model, profile, n_agents, paths, seed, ExecMode::auto())
}

/// `simulate_population` with an explicit execution mode.
pub fn simulate_population_mode(
    model: &Model,
    profile: &StrategyProfile,
    n_agents: usize,
    paths: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<PopulationRun> {
    check_budget(n_agents, paths, model.grid.steps())?;
    let kernel = PopulationKernel::new(model, profile, n_agents, false)?;
    let (n, m) = (model.n, model.m);
    let nn = model.grid.n_nodes();
    let na1 = n_agents + 1;

    let blocks = fold_paths(
        mode,
        paths,
        Vec::new,
        |acc: &mut Vec<RunBlock>, p| {
            let mut states = Vec::with_capacity(nn * na1 * n);
            let mut controls = Vec::with_capacity(nn * na1 * m);
            let mut averages = Vec::with_capacity(nn * n);
            kernel.run_path(seed, p, |st| {
                states.extend_from_slice(st.x);
                controls.extend_from_slice(st.u);
                averages.extend_from_slice(st.xavg);
            });
            acc.push(RunBlock {
                path: p,
                states,
                controls,
                averages,
            });
        },
        |mut a, b| {
            a.extend(b);
            a
        },
    );

    let mut run = PopulationRun {
        n,
        m,
        n_agents,
        n_nodes: nn,
        paths,
        seed,
        grid: model.grid,
        states: vec![0.0; paths * nn * na1 * n],
        controls: vec![0.0; paths * nn * na1 * m],
        averages: vec![0.0; paths * nn * n],
    };
    for blk in blocks {
        let (p, sl, cl, al) = (blk.path, nn * na1 * n, nn * na1 * m, nn * n);
        run.states[p * sl..(p + 1) * sl].copy_from_slice(&blk.states);
        run.controls[p * cl..(p + 1) * cl].copy_from_slice(&blk.controls);
        run.averages[p * al..(p + 1) * al].copy_from_slice(&blk.averages);
    }
    if !run.states.iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid(
            "population simulation produced non-finite states".into(),
        ));
    }
    Ok(run)
}

/// Monte Carlo standard errors of a cost report.
#[derive(Debug, Clone, Serialize)]
pub struct CostStderr {
    /// Standard error of the major cost.
    #[serde(rename = "J0")]
    pub j0: f64,
    /// Standard errors of the minor costs.
    #[serde(rename = "Ji")]
    pub ji: Vec<f64>,
    /// Standard error of the social cost.
    #[serde(rename = "Jsoc")]
    pub jsoc: f64,
}

/// Realized quadratic costs of a population run.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    /// Major cost estimate.
    #[serde(rename = "J0")]
    pub j0: f64,
    /// Minor cost estimates, one per agent.
    #[serde(rename = "Ji")]
    pub ji: Vec<f64>,
    /// Social cost (sum of the minor costs).
    #[serde(rename = "Jsoc")]
    pub jsoc: f64,
    /// Social cost per minor agent.
    #[serde(rename = "Jsoc_per_agent")]
    pub jsoc_per_agent: f64,
    /// Paths the estimates averaged over.
    pub paths: usize,
    /// Monte Carlo standard errors.
    pub stderr: CostStderr,
}

fn mean_and_se(sum: f64, sumsq: f64, paths: usize) -> (f64, f64) {
    let p = paths as f64;
    let mean = sum / p;
    if paths < 2 {
        return (mean, 0.0);
    }
    let var = ((sumsq - p * mean * mean) / (p - 1.0)).max(0.0);
    (mean, (var / p).sqrt())
}

/// Prices a stored run with the per-agent quadratic costs (trapezoid rule in
/// time, average over paths).  The social cost is the per-path sum of the
/// minor costs by definition.
pub fn evaluate_costs(run: &PopulationRun, model: &Model) -> Result<CostReport> {
    if run.grid != model.grid {
        return Err(Error::GridMismatch(
            "run and model grids differ in cost evaluation".into(),
        ));
    }
    if run.n != model.n || run.m != model.m {
        return Err(Error::Invalid(
            "run dimensions do not match the model".into(),
        ));
    }
    let (n, m, na) = (run.n, run.m, run.n_agents);
    let q0 = flat_nodes(&model.major.q0);
    let h0 = flat_nodes(&model.major.h0);
    let r0 = flat_nodes(&model.major.r0);
    let q = flat_nodes(&model.minor.q);
    let h = flat_nodes(&model.minor.h);
    let hh = flat_nodes(&model.minor.hhat);
    let r = flat_nodes(&model.minor.r);
    let dt = run.grid.dt();

    let mut e = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut tmpm = vec![0.0; m];
    let (mut s0, mut ss0, mut ssoc, mut sssoc) = (0.0, 0.0, 0.0, 0.0);
    let mut si = vec![0.0; na];
    let mut ssi = vec![0.0; na];
    let mut jip = vec![0.0; na];

    for p in 0..run.paths {
        let mut j0p = 0.0;
        jip.fill(0.0);
        for k in 0..run.n_nodes {
            let w = if k == 0 || k == run.n_nodes - 1 {
                0.5 * dt
            } else {
                dt
            };
            let avg = run.average(p, k);
            let x0 = run.state(p, k, 0);
            // Major integrand: (x0 - H0 xavg)' Q0 (x0 - H0 xavg) + u0' R0 u0.
            mv_set(&mut e, &h0[k], avg);
            for c_ in 0..n {
                e[c_] = x0[c_] - e[c_];
            }
            let mut val = quad_form(&q0[k], &e, &mut tmp);
            val += quad_form(&r0[k], run.control(p, k, 0), &mut tmpm);
            j0p += 0.5 * w * val;
            // Minor integrands: (xi - H x0 - Hhat xavg)' Q (..) + ui' R ui.
            for i in 1..=na {
                let xi = run.state(p, k, i);
                mv_set(&mut e, &h[k], x0);
                mv_acc(&mut e, &hh[k], avg);
                for c_ in 0..n {
                    e[c_] = xi[c_] - e[c_];
                }
                let mut val = quad_form(&q[k], &e, &mut tmp);
                val += quad_form(&r[k], run.control(p, k, i), &mut tmpm);
                jip[i - 1] += 0.5 * w * val;
            }
        }
        let jsocp: f64 = jip.iter().sum();
        s0 += j0p;
        ss0 += j0p * j0p;
        ssoc += jsocp;
        sssoc += jsocp * jsocp;
        for (i, v) in jip.iter().enumerate() {
            si[i] += v;
            ssi[i] += v * v;
        }
    }

    let (j0, j0se) = mean_and_se(s0, ss0, run.paths);
    let (jsoc, jsocse) = mean_and_se(ssoc, sssoc, run.paths);
    let mut ji = Vec::with_capacity(na);
    let mut jise = Vec::with_capacity(na);
    for i in 0..na {
        let (v, se) = mean_and_se(si[i], ssi[i], run.paths);
        ji.push(v);
        jise.push(se);
    }
    Ok(CostReport {
        j0,
        ji,
        jsoc,
        jsoc_per_agent: jsoc / na as f64,
        paths: run.paths,
        stderr: CostStderr {
            j0: j0se,
            ji: jise,
            jsoc: jsocse,
        },
    })
}

// ---------------------------------------------------------------------------
// small-population social-cost oracle
// ---------------------------------------------------------------------------

/// The joined (N+1)-agent system assembled block by block: drift, control,
/// one diffusion loading per noise channel, the stacked cost weights, and the
/// stacked initial state.  Built only for capped N.
#[derive(Debug, Clone)]
pub struct SocialOracle {
    /// Number of minors.
    pub n_agents: usize,
    /// Joined state dimension (N+1)*n.
    pub dim: usize,
    /// Joined control dimension (N+1)*m.
    pub udim: usize,
    /// Shared grid.
    pub grid: TimeGrid,
    /// Joined drift matrix.
    pub a: CoefficientPath,
    /// Joined control matrix (block diagonal).
    pub b: CoefficientPath,
    /// State diffusion loading of channel i (0 = common noise), one per
    /// channel; channel i only writes the rows of agent i.
    pub c: Vec<CoefficientPath>,
    /// Control diffusion loading of channel i.
    pub d: Vec<CoefficientPath>,
    /// Stacked state weight obtained by expanding the summed minor costs;
    /// this is the form the oracle evaluates with.
    pub q: CoefficientPath,
    /// Alternative major-row block convention (N Q in the corner,
    /// untransposed tracking factors); kept to quantify its disagreement.
    pub q_alt: CoefficientPath,
    /// Largest nodewise spectral-norm gap between the two weight forms.
    pub q_alt_gap: f64,
    /// Stacked control weight with a zero major block.
    pub r: CoefficientPath,
    /// Stacked initial state.
    pub init: DVector<f64>,
}

/// Assembles the joined system for `n_agents` minors (capped).
pub fn build_social_oracle(model: &Model, n_agents: usize) -> Result<SocialOracle> {
    if n_agents == 0 {
        return Err(Error::Invalid("oracle needs at least one minor".into()));
    }
    if n_agents > ORACLE_CAP {
        return Err(Error::OracleCap {
            n: n_agents,
            cap: ORACLE_CAP,
        });
    }
    let (n, m, na) = (model.n, model.m, n_agents);
    let nn = model.grid.n_nodes();
    let dim = (na + 1) * n;
    let udim = (na + 1) * m;
    let nf = na as f64;

    let mut a_nodes = Vec::with_capacity(nn);
    let mut b_nodes = Vec::with_capacity(nn);
    let mut c_nodes: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(nn); na + 1];
    let mut d_nodes: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(nn); na + 1];
    let mut q_nodes = Vec::with_capacity(nn);
    let mut qalt_nodes = Vec::with_capacity(nn);
    let mut r_nodes = Vec::with_capacity(nn);
    let mut gap = 0.0f64;

    for k in 0..nn {
        let ma = &model.major;
        let mi = &model.minor;

        // Drift: major row [A0, F0/N ...]; minor rows have A + F/N on the
        // diagonal, F/N elsewhere, and no major column.
        let mut a_k = DMatrix::zeros(dim, dim);
        a_k.view_mut((0, 0), (n, n)).copy_from(ma.a0.at(k));
        let f0n = ma.f0.at(k) / nf;
        let f_n = mi.f.at(k) / nf;
        for j in 1..=na {
            a_k.view_mut((0, j * n), (n, n)).copy_from(&f0n);
            for i in 1..=na {
                a_k.view_mut((i * n, j * n), (n, n)).copy_from(&f_n);
            }
        }
        for i in 1..=na {
            let blk = mi.a.at(k) + &f_n;
            a_k.view_mut((i * n, i * n), (n, n)).copy_from(&blk);
        }
        a_nodes.push(a_k);

        // Control: block diagonal B0, B, ..., B.
        let mut b_k = DMatrix::zeros(dim, udim);
        b_k.view_mut((0, 0), (n, m)).copy_from(ma.b0.at(k));
        for i in 1..=na {
            b_k.view_mut((i * n, i * m), (n, m)).copy_from(mi.b.at(k));
        }
        b_nodes.push(b_k);

        // Common-noise loading: only the major row, [C0, Ftilde0/N ...].
        let mut c0_k = DMatrix::zeros(dim, dim);
        c0_k.view_mut((0, 0), (n, n)).copy_from(ma.c0.at(k));
        let ft0n = ma.ftilde0.at(k) / nf;
        for j in 1..=na {
            c0_k.view_mut((0, j * n), (n, n)).copy_from(&ft0n);
        }
        c_nodes[0].push(c0_k);
        let mut d0_k = DMatrix::zeros(dim, udim);
        d0_k.view_mut((0, 0), (n, m)).copy_from(ma.d0.at(k));
        d_nodes[0].push(d0_k);

        // Channel i: only row i, [Gtilde, Ftilde/N + C delta_ij ...].
        let ftn = mi.ftilde.at(k) / nf;
        for i in 1..=na {
            let mut ci_k = DMatrix::zeros(dim, dim);
            ci_k.view_mut((i * n, 0), (n, n)).copy_from(mi.gtilde.at(k));
            for j in 1..=na {
                ci_k.view_mut((i * n, j * n), (n, n)).copy_from(&ftn);
            }
            let own = mi.c.at(k) + &ftn;
            ci_k.view_mut((i * n, i * n), (n, n)).copy_from(&own);
            c_nodes[i].push(ci_k);
            let mut di_k = DMatrix::zeros(dim, udim);
            di_k.view_mut((i * n, i * m), (n, m)).copy_from(mi.d.at(k));
            d_nodes[i].push(di_k);
        }

        // State weight from expanding sum_i |x_i - H x0 - Hhat xavg|^2_Q.
        let qk = mi.q.at(k);
        let hk = mi.h.at(k);
        let hhk = mi.hhat.at(k);
        let qh = qk * hk; // Q H
        let qhh = qk * hhk; // Q Hhat
        let hhq = hhk.transpose() * qk; // Hhat' Q
        let cross = hhk.transpose() * &qhh - &qhh - &hhq; // Hhat'Q Hhat - Q Hhat - Hhat'Q
        let q00 = hk.transpose() * &qh * nf;
        let q0j = hk.transpose() * (&qhh - qk);
        let qj0 = q0j.transpose();
        let qdiag = qk + &cross / nf;
        let qoff = &cross / nf;

        let mut q_k = DMatrix::zeros(dim, dim);
        q_k.view_mut((0, 0), (n, n)).copy_from(&q00);
        for j in 1..=na {
            q_k.view_mut((0, j * n), (n, n)).copy_from(&q0j);
            q_k.view_mut((j * n, 0), (n, n)).copy_from(&qj0);
            for i in 1..=na {
                q_k.view_mut((i * n, j * n), (n, n)).copy_from(&qoff);
            }
        }
        for i in 1..=na {
            q_k.view_mut((i * n, i * n), (n, n)).copy_from(&qdiag);
        }

        // Alternative convention: same minor blocks, different major row and
        // column (N Q + cross in the corner, untransposed tracking factors).
        let alt00 = qk * nf + &cross;
        let alt0j = &qh - &hhq * hk;
        let altj0 = hk * qk - hk * &qhh;
        let mut qa_k = q_k.clone();
        qa_k.view_mut((0, 0), (n, n)).copy_from(&alt00);
        for j in 1..=na {
            qa_k.view_mut((0, j * n), (n, n)).copy_from(&alt0j);
            qa_k.view_mut((j * n, 0), (n, n)).copy_from(&altj0);
        }
        gap = gap.max(spectral_norm(&(&q_k - &qa_k)));
        q_nodes.push(q_k);
        qalt_nodes.push(qa_k);

        // Control weight: zero major block, R for every minor.
        let mut r_k = DMatrix::zeros(udim, udim);
        for i in 1..=na {
            r_k.view_mut((i * m, i * m), (m, m)).copy_from(mi.r.at(k));
        }
        r_nodes.push(r_k);
    }

    let mut init = DVector::zeros(dim);
    init.view_mut((0, 0), (n, 1)).copy_from(&model.xi0);
    for i in 1..=na {
        init.view_mut((i * n, 0), (n, 1)).copy_from(&model.xi);
    }

    Ok(SocialOracle {
        n_agents: na,
        dim,
        udim,
        grid: model.grid,
        a: CoefficientPath::from_nodes(a_nodes, "stacked drift")?,
        b: CoefficientPath::from_nodes(b_nodes, "stacked control")?,
        c: c_nodes
            .into_iter()
            .map(|v| CoefficientPath::from_nodes(v, "stacked state loading"))
            .collect::<Result<Vec<_>>>()?,
        d: d_nodes
            .into_iter()
            .map(|v| CoefficientPath::from_nodes(v, "stacked control loading"))
            .collect::<Result<Vec<_>>>()?,
        q: CoefficientPath::from_nodes(q_nodes, "stacked state weight")?,
        q_alt: CoefficientPath::from_nodes(qalt_nodes, "alternative state weight")?,
        q_alt_gap: gap,
        r: CoefficientPath::from_nodes(r_nodes, "stacked control weight")?,
        init,
    })
}

/// Simulates the joined system with the oracle's dense matrices under the
/// same profile, seed, and channel map as `simulate_population`, returning
/// the trajectories in the same layout.  Agreement between the two routes
/// validates the block assembly.
pub fn simulate_stacked(
    oracle: &SocialOracle,
    model: &Model,
    profile: &StrategyProfile,
    paths: usize,
    seed: u64,
) -> Result<PopulationRun> {
    let na = oracle.n_agents;
    if oracle.grid != model.grid {
        return Err(Error::GridMismatch(
            "oracle and model grids differ".into(),
        ));
    }
    check_budget(na, paths, model.grid.steps())?;
    let prof = ProfileFlats::new(profile, model, na)?;
    let (n, m) = (model.n, model.m);
    let nn = model.grid.n_nodes();
    let steps = nn - 1;
    let dt = model.grid.dt();
    let sq = dt.sqrt();
    let na1 = na + 1;

    let mut run = PopulationRun {
        n,
        m,
        n_agents: na,
        n_nodes: nn,
        paths,
        seed,
        grid: model.grid,
        states: vec![0.0; paths * nn * na1 * n],
        controls: vec![0.0; paths * nn * na1 * m],
        averages: vec![0.0; paths * nn * n],
    };

    let mut u = vec![0.0; na1 * m];
    let mut hbuf = vec![0.0; 2 * n];
    for p in 0..paths {
        let mut x = oracle.init.clone();
        let mut xh = prof.drv_init.clone();
        let mut xhn = xh.clone();
        for k in 0..nn {
            prof.controls(k, x.as_slice(), &xh, &mut u);
            let so = ((p * nn) + k) * na1 * n;
            run.states[so..so + na1 * n].copy_from_slice(x.as_slice());
            let co = ((p * nn) + k) * na1 * m;
            run.controls[co..co + na1 * m].copy_from_slice(&u);
            let ao = ((p * nn) + k) * n;
            for comp in 0..n {
                let mut s = 0.0;
                for i in 1..=na {
                    s += x[i * n + comp];
                }
                run.averages[ao + comp] = s / na as f64;
            }
            if k == steps {
                break;
            }
            let uv = DVector::from_column_slice(&u);
            let mut xn = &x + (oracle.a.at(k) * &x + oracle.b.at(k) * &uv) * dt;
            let dw0 = sq * gaussian(seed, p as u64, k as u64, 0);
            for i in 0..=na {
                let dwi = if i == 0 {
                    dw0
                } else {
                    sq * gaussian(seed, p as u64, k as u64, i as u64)
                };
                xn += (oracle.c[i].at(k) * &x + oracle.d[i].at(k) * &uv) * dwi;
            }
            prof.step_xh(k, &xh, &mut xhn, dt, dw0, &mut hbuf);
            std::mem::swap(&mut xh, &mut xhn);
            x = xn;
        }
    }
    if !run.states.iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid(
            "stacked simulation produced non-finite states".into(),
        ));
    }
    Ok(run)
}

/// Social cost priced through the stacked quadratic form.
#[derive(Debug, Clone, Serialize)]
pub struct OracleCost {
    /// Social cost with the expansion-derived state weight.
    #[serde(rename = "Jsoc")]
    pub jsoc: f64,
    /// Its Monte Carlo standard error.
    pub stderr: f64,
    /// Social cost with the alternative weight convention.
    #[serde(rename = "Jsoc_alt")]
    pub jsoc_alt: f64,
    /// Its Monte Carlo standard error.
    pub stderr_alt: f64,
    /// |Jsoc - Jsoc_alt|.
    pub weight_gap: f64,
}

/// Prices a stored run with `x' Q x + u' R u` for both stacked weight forms.
pub fn oracle_cost_from_run(oracle: &SocialOracle, run: &PopulationRun) -> Result<OracleCost> {
    if run.n_agents != oracle.n_agents {
        return Err(Error::Invalid(format!(
            "run has N={}, oracle has N={}",
            run.n_agents, oracle.n_agents
        )));
    }
    if run.grid != oracle.grid {
        return Err(Error::GridMismatch(
            "run and oracle grids differ".into(),
        ));
    }
    let dt = run.grid.dt();
    let na1 = run.n_agents + 1;
    let q = flat_nodes(&oracle.q);
    let qa = flat_nodes(&oracle.q_alt);
    let r = flat_nodes(&oracle.r);
    let (dim, udim) = (oracle.dim, oracle.udim);
    let mut tmp = vec![0.0; dim.max(udim)];
    let (mut s, mut ss, mut sa, mut ssa) = (0.0, 0.0, 0.0, 0.0);

    for p in 0..run.paths {
        let mut jp = 0.0;
        let mut jap = 0.0;
        for k in 0..run.n_nodes {
            let w = if k == 0 || k == run.n_nodes - 1 {
                0.5 * dt
            } else {
                dt
            };
            let so = ((p * run.n_nodes) + k) * na1 * run.n;
            let x = &run.states[so..so + dim];
            let co = ((p * run.n_nodes) + k) * na1 * run.m;
            let uv = &run.controls[co..co + udim];
            let ru = quad_form(&r[k], uv, &mut tmp[..udim]);
            jp += 0.5 * w * (quad_form(&q[k], x, &mut tmp[..dim]) + ru);
            jap += 0.5 * w * (quad_form(&qa[k], x, &mut tmp[..dim]) + ru);
        }
        s += jp;
        ss += jp * jp;
        sa += jap;
        ssa += jap * jap;
    }
    let (jsoc, se) = mean_and_se(s, ss, run.paths);
    let (jsoc_alt, se_alt) = mean_and_se(sa, ssa, run.paths);
    Ok(OracleCost {
        jsoc,
        stderr: se,
        jsoc_alt,
        stderr_alt: se_alt,
        weight_gap: (jsoc - jsoc_alt).abs(),
    })
}

// ---------------------------------------------------------------------------
// exact cost evaluation and the stacked optimum
// ---------------------------------------------------------------------------

/// A strategy profile rewritten as one affine control law on the joined state
/// extended by the conditional feedforward state.
struct StackedAffineControls {
    /// Gain, udim x (dim + 2n) per node.
    k: CoefficientPath,
    /// Deterministic offset, udim x 1 per node.
    v: CoefficientPath,
    /// Conditional-state drift, 2n x 2n per node.
    drv_a: CoefficientPath,
    /// Conditional-state common-noise diffusion, 2n x 2n per node.
    drv_v: CoefficientPath,
    /// Conditional-state initial value.
    hinit: DVector<f64>,
}

fn stacked_control_paths(
    profile: &StrategyProfile,
    oracle: &SocialOracle,
    model: &Model,
) -> Result<StackedAffineControls> {
    // Reuse the flat builder for all dimension and grid checks.
    let _ = ProfileFlats::new(profile, model, oracle.n_agents)?;
    let (n, m, na) = (model.n, model.m, oracle.n_agents);
    let nn = model.grid.n_nodes();
    let (dim, udim, dh) = (oracle.dim, oracle.udim, 2 * n);

    let mut k_nodes = Vec::with_capacity(nn);
    let mut v_nodes = Vec::with_capacity(nn);
    for k in 0..nn {
        let mut kmat = DMatrix::zeros(udim, dim + dh);
        match profile {
            StrategyProfile::Decentralized {
                major_gain,
                minor_gain,
                feedforward,
                ..
            } => {
                kmat.view_mut((0, 0), (m, n)).copy_from(major_gain.at(k));
                for i in 1..=na {
                    kmat.view_mut((i * m, i * n), (m, n))
                        .copy_from(minor_gain.at(k));
                }
                if let Feedforward::Conditional(drv) = feedforward {
                    kmat.view_mut((0, dim), (m, dh)).copy_from(&drv.theta2[k]);
                    for i in 1..=na {
                        kmat.view_mut((i * m, dim), (m, dh))
                            .copy_from(&drv.lambda2[k]);
                    }
                }
            }
            StrategyProfile::StackedFeedback {
                major_gain,
                minor_gain_stacked,
                ..
            } => {
                kmat.view_mut((0, 0), (m, n)).copy_from(major_gain.at(k));
                kmat.view_mut((m, 0), (na * m, dim))
                    .copy_from(minor_gain_stacked.at(k));
            }
        }
        k_nodes.push(kmat);

        let mut vvec = DMatrix::zeros(udim, 1);
        for off in profile.offsets() {
            let du = off.du.at(k);
            for c in 0..m {
                vvec[(off.agent * m + c, 0)] += du[(c, 0)];
            }
        }
        v_nodes.push(vvec);
    }

    let (drv_a, drv_v, hinit) = match profile {
        StrategyProfile::Decentralized {
            feedforward: Feedforward::Conditional(drv),
            ..
        } => (
            CoefficientPath::from_nodes(drv.drift.clone(), "conditional drift")?,
            CoefficientPath::from_nodes(drv.vol.clone(), "conditional diffusion")?,
            drv.init.clone(),
        ),
        _ => (
            CoefficientPath::zeros(dh, dh, nn),
            CoefficientPath::zeros(dh, dh, nn),
            DVector::zeros(dh),
        ),
    };

    Ok(StackedAffineControls {
        k: CoefficientPath::from_nodes(k_nodes, "stacked control gain")?,
        v: CoefficientPath::from_nodes(v_nodes, "stacked control offset")?,
        drv_a,
        drv_v,
        hinit,
    })
}

/// Expected social cost of the profile on the joined system, computed without
/// Monte Carlo error: the first and second moments of the closed linear
/// system obey matrix ODEs, the expected running cost is a scalar ODE state,
/// and all three are integrated together with RK4.
pub fn oracle_cost_exact(
    oracle: &SocialOracle,
    model: &Model,
    profile: &StrategyProfile,
) -> Result<f64> {
    let sc = stacked_control_paths(profile, oracle, model)?;
    let (dim, dh) = (oracle.dim, 2 * model.n);
    let dtot = dim + dh;
    let grid = oracle.grid;
    let dt = grid.dt();
    let steps = grid.steps();

    let mut mu = DVector::zeros(dtot);
    mu.rows_mut(0, dim).copy_from(&oracle.init);
    mu.rows_mut(dim, dh).copy_from(&sc.hinit);
    let mut sig = &mu * mu.transpose();
    let mut j = 0.0f64;

    let eval = |k: usize,
                pt: IntervalPoint,
                mu: &DVector<f64>,
                sig: &DMatrix<f64>|
     -> (DVector<f64>, DMatrix<f64>, f64) {
        let a = path_at_point(&oracle.a, k, pt);
        let b = path_at_point(&oracle.b, k, pt);
        let kst = path_at_point(&sc.k, k, pt);
        let vst = path_at_point(&sc.v, k, pt);
        let q = path_at_point(&oracle.q, k, pt);
        let r = path_at_point(&oracle.r, k, pt);
        let da = path_at_point(&sc.drv_a, k, pt);
        let dv = path_at_point(&sc.drv_v, k, pt);
        let kx = kst.columns(0, dim).into_owned();
        let kh = kst.columns(dim, dh).into_owned();

        let mut ab = DMatrix::zeros(dtot, dtot);
        ab.view_mut((0, 0), (dim, dim)).copy_from(&(&a + &b * &kx));
        ab.view_mut((0, dim), (dim, dh)).copy_from(&(&b * &kh));
        ab.view_mut((dim, dim), (dh, dh)).copy_from(&da);
        let mut bv = DVector::zeros(dtot);
        bv.rows_mut(0, dim).copy_from(&(&b * &vst).column(0));

        let dmu = &ab * mu + &bv;
        let mut dsig = &ab * sig + sig * ab.transpose();
        dsig += &bv * mu.transpose() + mu * bv.transpose();
        for i in 0..=oracle.n_agents {
            let ci = path_at_point(&oracle.c[i], k, pt);
            let di = path_at_point(&oracle.d[i], k, pt);
            let mut cb = DMatrix::zeros(dtot, dtot);
            cb.view_mut((0, 0), (dim, dim))
                .copy_from(&(&ci + &di * &kx));
            cb.view_mut((0, dim), (dim, dh)).copy_from(&(&di * &kh));
            if i == 0 {
                cb.view_mut((dim, dim), (dh, dh)).copy_from(&dv);
            }
            let mut dvv = DVector::zeros(dtot);
            dvv.rows_mut(0, dim).copy_from(&(&di * &vst).column(0));
            let cs = &cb * sig;
            dsig += &cs * cb.transpose();
            let cmu = &cb * mu;
            dsig += &cmu * dvv.transpose() + &dvv * cmu.transpose() + &dvv * dvv.transpose();
        }

        let sxx = sig.view((0, 0), (dim, dim)).into_owned();
        let mut rate = (&q * &sxx).trace();
        let krk = kst.transpose() * &r * &kst;
        rate += (&krk * sig).trace();
        let kmu = &kst * mu;
        let rv = &r * &vst;
        rate += 2.0 * kmu.dot(&rv.column(0).into_owned());
        rate += (vst.transpose() * &rv)[(0, 0)];
        (dmu, dsig, 0.5 * rate)
    };

    for k in 0..steps {
        let half = 0.5 * dt;
        let s1 = eval(k, IntervalPoint::Left, &mu, &sig);
        let s2 = eval(
            k,
            IntervalPoint::Mid,
            &(&mu + &s1.0 * half),
            &(&sig + &s1.1 * half),
        );
        let s3 = eval(
            k,
            IntervalPoint::Mid,
            &(&mu + &s2.0 * half),
            &(&sig + &s2.1 * half),
        );
        let s4 = eval(
            k,
            IntervalPoint::Right,
            &(&mu + &s3.0 * dt),
            &(&sig + &s3.1 * dt),
        );
        mu += (s1.0 + s2.0 * 2.0 + s3.0 * 2.0 + s4.0) * (dt / 6.0);
        sig += (s1.1 + s2.1 * 2.0 + s3.1 * 2.0 + s4.1) * (dt / 6.0);
        j += (s1.2 + 2.0 * s2.2 + 2.0 * s3.2 + s4.2) * (dt / 6.0);
    }
    if !j.is_finite() {
        return Err(Error::NonFinite {
            name: "exact social cost".into(),
            node: steps,
        });
    }
    Ok(j)
}

/// Central difference of the exact social cost along a perturbation
/// direction; for the quadratic cost this is the exact directional
/// derivative, so it vanishes at the optimum.
pub fn frechet_gap(
    model: &Model,
    oracle: &SocialOracle,
    base: &StrategyProfile,
    direction: &[ControlOffset],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let plus = base.clone().with_scaled_offsets(direction, h);
    let minus = base.clone().with_scaled_offsets(direction, -h);
    let jp = oracle_cost_exact(oracle, model, &plus)?;
    let jm = oracle_cost_exact(oracle, model, &minus)?;
    Ok((jp - jm) / (2.0 * h))
}

/// Exact minimizer of the social cost over the minor controls with the major
/// feedback loop closed, from the Riccati equation of the joined system.
/// Valid when the major's equilibrium feedforward vanishes (no minor-to-major
/// couplings), so that closing the loop with the feedback gain alone
/// reproduces the major's behavior.
pub fn solve_stacked_optimum(
    oracle: &SocialOracle,
    model: &Model,
    p_major: &RiccatiSolution,
) -> Result<StrategyProfile> {
    if oracle.grid != model.grid || p_major.grid != model.grid {
        return Err(Error::GridMismatch(
            "oracle, model, and major value grids differ".into(),
        ));
    }
    let (n, m, na) = (model.n, model.m, oracle.n_agents);
    let (dim, nm) = (oracle.dim, na * m);
    let grid = oracle.grid;

    // Closed-loop pieces at an RK4 stage point: drift and channel loadings
    // with the major feedback substituted, minor-column control blocks, and
    // the minor-block control weight.
    let pieces = |k: usize,
                  pt: IntervalPoint|
     -> (DMatrix<f64>, Vec<DMatrix<f64>>, DMatrix<f64>, Vec<DMatrix<f64>>, DMatrix<f64>, DMatrix<f64>) {
        let b0 = path_at_point(&model.major.b0, k, pt);
        let d0 = path_at_point(&model.major.d0, k, pt);
        let th1 = path_at_point(&p_major.gain, k, pt);
        let mut acl = path_at_point(&oracle.a, k, pt);
        let ablk = acl.view((0, 0), (n, n)) + &b0 * &th1;
        acl.view_mut((0, 0), (n, n)).copy_from(&ablk);
        let mut ccl: Vec<DMatrix<f64>> = (0..=na)
            .map(|i| path_at_point(&oracle.c[i], k, pt))
            .collect();
        let cblk = ccl[0].view((0, 0), (n, n)) + &d0 * &th1;
        ccl[0].view_mut((0, 0), (n, n)).copy_from(&cblk);
        let bmin = path_at_point(&oracle.b, k, pt).columns(m, nm).into_owned();
        let dmin: Vec<DMatrix<f64>> = (0..=na)
            .map(|i| path_at_point(&oracle.d[i], k, pt).columns(m, nm).into_owned())
            .collect();
        let q = path_at_point(&oracle.q, k, pt);
        let rmin = path_at_point(&oracle.r, k, pt)
            .view((m, m), (nm, nm))
            .into_owned();
        (acl, ccl, bmin, dmin, q, rmin)
    };

    let weighting_and_gain = |k: usize,
                              pt: IntervalPoint,
                              pm: &DMatrix<f64>|
     -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>, DMatrix<f64>, DMatrix<f64>)> {
        let (acl, ccl, bmin, dmin, q, rmin) = pieces(k, pt);
        let mut w = rmin;
        for di in &dmin {
            w += di.transpose() * pm * di;
        }
        let chol = spd_factor(&w, "stacked control weighting", k, grid.time(k))?;
        let mut s = bmin.transpose() * pm;
        for (ci, di) in ccl.iter().zip(&dmin) {
            s += di.transpose() * pm * ci;
        }
        let winv_s = chol.solve(&s);
        Ok((acl, s, ccl, q, winv_s))
    };

    let p_path = integrate_linear_matrix_ode(
        &grid,
        DMatrix::zeros(dim, dim),
        "stacked social value",
        |k, pt, pm| {
            let (acl, s, ccl, q, winv_s) = weighting_and_gain(k, pt, pm)?;
            let mut deriv = acl.transpose() * pm + pm * &acl + q;
            for ci in &ccl {
                deriv += ci.transpose() * pm * ci;
            }
            deriv -= s.transpose() * &winv_s;
            Ok(-sym_part(&deriv))
        },
    )?;

    let nn = grid.n_nodes();
    let mut gains = Vec::with_capacity(nn);
    for k in 0..nn {
        let (_, _, _, _, winv_s) = weighting_and_gain(k, IntervalPoint::Left, p_path.at(k))?;
        gains.push(-winv_s);
    }
    Ok(StrategyProfile::StackedFeedback {
        major_gain: p_major.gain.clone(),
        minor_gain_stacked: CoefficientPath::from_nodes(gains, "stacked optimal gain")?,
        offsets: Vec::new(),
        n_agents: na,
    })
}

/// Draws a smooth deterministic perturbation direction for the minor
/// coalition, normalized so the summed control energy over all N minors
/// equals N (trapezoid rule in time).
pub fn random_direction(model: &Model, n_agents: usize, seed: u64) -> Result<Vec<ControlOffset>> {
    let grid = model.grid;
    let nn = grid.n_nodes();
    let horizon = grid.horizon();
    let dt = grid.dt();
    let m = model.m;
    let mut offs = Vec::with_capacity(n_agents);
    let mut total = 0.0;
    for agent in 1..=n_agents {
        let coef: Vec<(f64, f64)> = (0..m)
            .map(|c| {
                (
                    gaussian(seed, agent as u64, 0, 9000 + c as u64),
                    gaussian(seed, agent as u64, 1, 9000 + c as u64),
                )
            })
            .collect();
        let mut nodes = Vec::with_capacity(nn);
        for k in 0..nn {
            let tau = grid.time(k) / horizon;
            let mut v = DMatrix::zeros(m, 1);
            for (c, (c1, c2)) in coef.iter().enumerate() {
                let arg = std::f64::consts::PI * tau;
                v[(c, 0)] = c1 * arg.sin() + c2 * arg.cos();
            }
            nodes.push(v);
        }
        let du = CoefficientPath::from_nodes(nodes, "direction offset")?;
        for k in 0..nn {
            let w = if k == 0 || k == nn - 1 { 0.5 * dt } else { dt };
            total += w * du.at(k).iter().map(|v| v * v).sum::<f64>();
        }
        offs.push(ControlOffset { agent, du });
    }
    let scale = if total > 0.0 {
        (n_agents as f64 / total).sqrt()
    } else {
        1.0
    };
    Ok(offs
        .into_iter()
        .map(|o| ControlOffset {
            agent: o.agent,
            du: o.du.scaled(scale),
        })
        .collect())
}
