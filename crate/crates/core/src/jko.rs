//! Minimizing-movement (JKO) steps for the envelope energy.
//!
//! One step from the pair (rho_k, mu_k) minimizes
//!     F(p, q) + [W2^2(p, rho_k) + W2^2(q, mu_k)] / (2 tau)
//! over density pairs, where F(p, q) = h * sum_i f(p_i, q_i) and f is the
//! convex envelope from [`crate::envelope`].  The minimization is solved with
//! a log-domain entropic scaling loop: each species' transport plan is written
//! as gamma_ij = exp((phi_i + psi_j - c_ij) / eps_tilde) with
//! eps_tilde = 2 * tau * eps_reg, the fixed marginal (the previous iterate) is
//! enforced by an exact row projection, and the free marginal is updated by a
//! joint pointwise proximal step that solves, per cell,
//!     min_{p,q >= 0}  h f(p, q) + eps [KL(P || xi_rho) + KL(Q || xi_mu)]
//! by damped Newton in (ln p, ln q) with a monotone coordinate-bisection
//! fallback.  The prox optimality conditions pin the free duals to
//! psi = -2 tau f_a(p, q) (resp. f_b), which is also how warm starts are
//! carried across steps and across the variational-interpolation ladder.
//!
//! Cold starts anneal eps_tilde geometrically from diam^2/4 down so the plan
//! can move mass globally before the kernel sharpens.  The scaling loop is
//! convergent while the kernel bandwidth stays comparable to a cell; once
//! eps_tilde drops far below h^2 its contraction degenerates like
//! exp(-h^2/eps_tilde) (adjacent-cell plan entries become astronomically
//! stiff functions of the duals), while at the same time the regularized
//! minimizer agrees with the unregularized one to below f64 resolution.  In
//! that sharp-kernel regime (eps_tilde < h^2/129, i.e. coupling corrections
//! under 1e-14) the solve is therefore finished by a damped Newton iteration
//! on the shared optimality system
//!     f_a(p, q) + u_rho / tau = kappa_rho,   f_b(p, q) + u_mu / tau = kappa_mu,
//! where u is the primitive of (id - T) and T the exact quantile map back to
//! the anchor — the same first-order system the scaling loop's fixed point
//! satisfies, solved in log-mass coordinates with bordered mass constraints.
//!
//! After the solve, the step is finished with EXACT quantile transport back
//! to the previous iterate: reported `w2sq_*` and `potential_grad_*` come
//! from [`crate::transport::quantile_w2`], not from the entropic plan, so the
//! energy-dissipation ledger is built on unregularized distances.
//!
//! Variational interpolation: `de_giorgi_step` runs the same solve with
//! penalty scale s*tau, s in (0, 1]; `run_trajectory` records samples at the
//! configured quadrature nodes for every step, walking the ladder from s = 1
//! downward and warm-starting each solve from its neighbor.

use crate::envelope::{EnvelopeOracle, Region};
use crate::grid::{Density, DensityPair, Grid1D};
use crate::numerics::{logsumexp, pairwise_sum};
use crate::transport;
use crate::{Error, Result};

/// L1 marginal tolerance used for intermediate annealing stages; only the
/// final stage is driven to `scaling_tol`.
const ANNEAL_STAGE_TOL: f64 = 1e-4;

/// Warm-started solves still take a short annealing ramp (these multiples of
/// the target eps) to absorb drift between consecutive anchors.
const WARM_RAMP: [f64; 4] = [64.0, 16.0, 4.0, 1.0];

/// Parameters of the minimizing-movement solver.
#[derive(Debug, Clone)]
pub struct JkoConfig {
    /// Time step of the outer scheme.
    pub tau: f64,
    /// Entropic regularization strength; the plan kernel scale is
    /// 2 * tau * eps_reg.
    pub eps_reg: f64,
    /// Absolute residual tolerance of the pointwise prox Newton solve.
    pub prox_newton_tol: f64,
    /// L1 violation of the fixed marginal at which scaling stops.
    pub scaling_tol: f64,
    /// Hard cap on scaling iterations per solve.
    pub max_scaling_iter: usize,
    /// Variational-interpolation quadrature nodes in (0, 1].
    pub dg_nodes: Vec<f64>,
}

impl JkoConfig {
    pub fn new(tau: f64, eps_reg: f64) -> Result<Self> {
        let cfg = JkoConfig {
            tau,
            eps_reg,
            prox_newton_tol: 1e-12,
            scaling_tol: 1e-8,
            max_scaling_iter: 20_000,
            dg_nodes: (1..=8).map(|k| k as f64 / 8.0).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Domain("tau must be positive"));
        }
        if !(self.eps_reg > 0.0 && self.eps_reg.is_finite()) {
            return Err(Error::Domain("eps_reg must be positive"));
        }
        if !(self.prox_newton_tol > 0.0) {
            return Err(Error::Domain("prox_newton_tol must be positive"));
        }
        if !(self.scaling_tol > 0.0) {
            return Err(Error::Domain("scaling_tol must be positive"));
        }
        if self.max_scaling_iter == 0 {
            return Err(Error::Domain("max_scaling_iter must be positive"));
        }
        if self.dg_nodes.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Domain(
                "variational-interpolation nodes must lie in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Density floor below which cells are dropped from mass-weighted
    /// diagnostics (1e-9 of total mass spread over one cell).
    pub fn mass_floor(&self, grid: Grid1D) -> f64 {
        1e-9 / grid.h()
    }
}

/// Scaling duals in their step-size-free form psi_hat = -f_grad(solution),
/// plus the last prox point; both warm-start later solves.
#[derive(Debug, Clone)]
pub struct ScalingDuals {
    psi_hat_rho: Vec<f64>,
    psi_hat_mu: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

/// Output of a single minimizing-movement step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// The minimizer pair (renormalized to unit mass).
    pub next: DensityPair,
    /// Exact squared quantile-transport distance from `next.rho` back to the
    /// anchor rho.
    pub w2sq_rho: f64,
    pub w2sq_mu: f64,
    /// Signed per-cell rms displacement of the exact map from `next.rho` to
    /// the anchor (so h * sum rho * pg^2 = w2sq exactly).
    pub potential_grad_rho: Vec<f64>,
    pub potential_grad_mu: Vec<f64>,
    /// Mass-weighted spread of f_a + phi/tau over occupied cells, relative to
    /// the spread of its two constituents; near zero iff the discrete
    /// Euler-Lagrange identity holds along the step.
    pub optimality_residual_rho: f64,
    pub optimality_residual_mu: f64,
    /// Scaling iterations spent in the entropic solve.
    pub scaling_iters: usize,
    /// Newton iterations spent in the sharp-kernel polish (zero when the
    /// kernel is wide enough for the scaling loop to finish on its own).
    pub polish_iters: usize,
}

/// One variational-interpolation sample: the minimizer at penalty scale
/// s * tau together with its exact distances back to the step anchor.
#[derive(Debug, Clone)]
pub struct DeGiorgiSample {
    pub s: f64,
    pub pair: DensityPair,
    pub w2sq_rho: f64,
    pub w2sq_mu: f64,
}

/// One trajectory step: the minimizer, the interpolation ladder, and the
/// discrete velocities v = (id - T)/tau carried by the new iterate.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub result: StepResult,
    pub de_giorgi: Vec<DeGiorgiSample>,
    pub velocity_rho: Vec<f64>,
    pub velocity_mu: Vec<f64>,
}

/// A full minimizing-movement trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: DensityPair,
    pub tau: f64,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn t_max(&self) -> f64 {
        self.tau * self.steps.len() as f64
    }

    /// Iterate k = 0 is the initial pair; k = n is the n-th minimizer.
    pub fn pair_at(&self, k: usize) -> &DensityPair {
        if k == 0 {
            &self.initial
        } else {
            &self.steps[k - 1].result.next
        }
    }

    pub fn final_pair(&self) -> &DensityPair {
        self.pair_at(self.steps.len())
    }
}

/// Time-interpolation conventions between trajectory nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpKind {
    /// Piecewise constant, taking the value of iterate k+1 on (k tau, (k+1) tau].
    Constant,
    /// Wasserstein geodesic (displacement interpolation) between consecutive
    /// iterates, per species.
    Geodesic,
    /// The stored variational-interpolation sample whose node is nearest to
    /// the requested fraction.
    DeGiorgi,
}

/// An interpolated pair; `exact_node` is false when a De Giorgi query fell
/// between stored quadrature nodes and the nearest one was returned.
#[derive(Debug, Clone)]
pub struct Interpolant {
    pub pair: DensityPair,
    pub exact_node: bool,
}

/// Per-species scaling state in log domain.
struct SpeciesState {
    /// ln of anchor cell masses (-inf on vacuum cells).
    ln_mass: Vec<f64>,
    mass: Vec<f64>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    /// ln of the pre-marginal xi_j = sum_i exp((phi_i - c_ij)/eps).
    lxi: Vec<f64>,
    have_phi: bool,
}

impl SpeciesState {
    fn new(anchor: &Density) -> Self {
        let h = anchor.grid().h();
        let mass: Vec<f64> = anchor.values().iter().map(|&v| v * h).collect();
        let ln_mass = mass
            .iter()
            .map(|&m| if m > 0.0 { m.ln() } else { f64::NEG_INFINITY })
            .collect();
        let n = anchor.grid().n_cells();
        SpeciesState {
            ln_mass,
            mass,
            phi: vec![0.0; n],
            psi: vec![0.0; n],
            lxi: vec![0.0; n],
            have_phi: false,
        }
    }

    /// Exact row projection; returns the L1 violation of the plan held before
    /// this update (valid once a previous phi at the same eps exists).
    fn row_update(&mut self, cost: &[f64], eps: f64, scratch: &mut [f64]) -> f64 {
        let n = self.phi.len();
        let mut viol = 0.0;
        for i in 0..n {
            if self.ln_mass[i] == f64::NEG_INFINITY {
                self.phi[i] = f64::NEG_INFINITY;
                continue;
            }
            let row = &cost[i * n..(i + 1) * n];
            for j in 0..n {
                scratch[j] = (self.psi[j] - row[j]) / eps;
            }
            let lse = logsumexp(scratch);
            let fresh = eps * (self.ln_mass[i] - lse);
            if self.have_phi {
                viol += self.mass[i] * (((self.phi[i] - fresh) / eps).exp() - 1.0).abs();
            } else {
                viol = f64::INFINITY;
            }
            self.phi[i] = fresh;
        }
        self.have_phi = true;
        viol
    }

    /// Column log-pre-marginals from the current phi.
    fn col_update(&mut self, cost: &[f64], eps: f64, scratch: &mut [f64]) {
        let n = self.phi.len();
        for j in 0..n {
            // cost is symmetric, so column j is row j.
            let row = &cost[j * n..(j + 1) * n];
            for i in 0..n {
                scratch[i] = (self.phi[i] - row[i]) / eps;
            }
            self.lxi[j] = logsumexp(scratch);
        }
    }
}

/// Value and first derivatives of the envelope gradient in log coordinates
/// w = (ln p, ln q); the B-branch is written directly in w so vacuum cells
/// stay finite.  A (vanishingly rare) failed well solve surfaces as NaN,
/// which the prox iteration rejects and reports as a prox failure.
fn grad_in_log(
    oracle: &EnvelopeOracle,
    w1: f64,
    w2: f64,
) -> (f64, f64, f64, f64, f64, f64) {
    let p = w1.exp();
    let q = w2.exp();
    match oracle.classify(p, q) {
        Region::B => {
            let fa = w1 + q + 1.0;
            let fb = w2 + p + 1.0;
            (fa, fb, 1.0, q, p, 1.0)
        }
        Region::A => {
            let s = p + q;
            let fp = oracle.tilde_f_prime(s).unwrap_or(f64::NAN);
            let fs = oracle.tilde_f_second(s).unwrap_or(f64::NAN);
            (fp, fp, fs * p, fs * q, fs * p, fs * q)
        }
    }
}

/// One componentwise Aitken delta-squared extrapolation toward the fixed
/// point, applied where three consecutive iterates show a stable geometric
/// decay.  For kernel scales far below h^2 the scaling map contracts at a
/// rate 1 - O(eps_reg), which is hopeless to iterate out directly; the error
/// is then dominated by a single smooth mode, which delta-squared removes.
/// Returns true if any component moved.
fn aitken_extrapolate(s0: &[f64], s1: &[f64], s2: &[f64], out: &mut [f64]) -> bool {
    let mut moved = false;
    for j in 0..out.len() {
        let d1 = s1[j] - s0[j];
        let d2 = s2[j] - s1[j];
        out[j] = s2[j];
        if d1.abs() <= 1e-300 || d2 == 0.0 {
            continue;
        }
        let r = d2 / d1;
        if r <= 0.0 || r >= 0.999_999_9 {
            continue;
        }
        let corr = d2 * r / (1.0 - r);
        let cap = 0.5 * (1.0 + s2[j].abs());
        out[j] = s2[j] + corr.clamp(-cap, cap);
        moved = true;
    }
    moved
}

/// Solves the pointwise prox system
///     f_a(p,q) + lam (ln p - lz_r) = 0,  f_b(p,q) + lam (ln q - lz_m) = 0
/// in log coordinates by damped Newton with a monotone coordinate-bisection
/// fallback.  Returns (p, q, f_a, f_b) at the root.
#[allow(clippy::too_many_arguments)]
fn prox_cell(
    oracle: &EnvelopeOracle,
    lam: f64,
    lz_r: f64,
    lz_m: f64,
    w1_init: f64,
    w2_init: f64,
    tol: f64,
    cell: usize,
) -> Result<(f64, f64, f64, f64)> {
    let tol_eff = tol * lam.max(1.0);
    let residual = |w1: f64, w2: f64| {
        let (fa, fb, j11, j12, j21, j22) = grad_in_log(oracle, w1, w2);
        let g1 = fa + lam * (w1 - lz_r);
        let g2 = fb + lam * (w2 - lz_m);
        (g1, g2, fa, fb, j11 + lam, j12, j21, j22 + lam)
    };

    let mut w1 = w1_init;
    let mut w2 = w2_init;
    let (mut g1, mut g2, mut fa, mut fb, mut j11, mut j12, mut j21, mut j22) = residual(w1, w2);
    for _ in 0..80 {
        if g1.abs().max(g2.abs()) <= tol_eff {
            return Ok((w1.exp(), w2.exp(), fa, fb));
        }
        let det = j11 * j22 - j12 * j21;
        if !(det > 0.0) {
            break;
        }
        let mut d1 = -(j22 * g1 - j12 * g2) / det;
        let mut d2 = -(j11 * g2 - j21 * g1) / det;
        let scale = d1.abs().max(d2.abs());
        if scale > 40.0 {
            d1 *= 40.0 / scale;
            d2 *= 40.0 / scale;
        }
        let norm_old = g1 * g1 + g2 * g2;
        let mut t = 1.0;
        let mut accepted = false;
        while t >= 1e-7 {
            let c1 = w1 + t * d1;
            let c2 = w2 + t * d2;
            let cand = residual(c1, c2);
            let norm_new = cand.0 * cand.0 + cand.1 * cand.1;
            if norm_new.is_finite() && norm_new < norm_old {
                w1 = c1;
                w2 = c2;
                (g1, g2, fa, fb, j11, j12, j21, j22) = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if g1.abs().max(g2.abs()) <= tol_eff {
        return Ok((w1.exp(), w2.exp(), fa, fb));
    }

    // Fallback: both partial maps are strictly increasing in their own
    // coordinate (the per-cell objective is strictly convex), so alternate
    // exact 1-D bisections.
    for _ in 0..300 {
        w1 = bisect_coord(|w| residual(w, w2).0, w1)
            .ok_or(Error::ProxFailure {
                cell,
                detail: "bisection could not bracket the first coordinate",
            })?;
        w2 = bisect_coord(|w| residual(w1, w).1, w2)
            .ok_or(Error::ProxFailure {
                cell,
                detail: "bisection could not bracket the second coordinate",
            })?;
        let r = residual(w1, w2);
        if r.0.abs().max(r.1.abs()) <= tol_eff {
            return Ok((w1.exp(), w2.exp(), r.2, r.3));
        }
    }
    Err(Error::ProxFailure {
        cell,
        detail: "coordinate bisection stalled",
    })
}

/// Root of a strictly increasing scalar map, bracketed by doubling expansion
/// around `start` and then bisected to floating-point exhaustion.
fn bisect_coord(g: impl Fn(f64) -> f64, start: f64) -> Option<f64> {
    let mut lo = start - 1.0;
    let mut hi = start + 1.0;
    let mut step = 1.0;
    for _ in 0..80 {
        if g(lo) <= 0.0 {
            break;
        }
        step *= 2.0;
        lo -= step;
    }
    if g(lo) > 0.0 {
        return None;
    }
    step = 1.0;
    for _ in 0..80 {
        if g(hi) >= 0.0 {
            break;
        }
        step *= 2.0;
        hi += step;
    }
    if g(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Squared-distance cost matrix between cell centers, row-major.
fn cost_matrix(grid: Grid1D) -> Vec<f64> {
    let n = grid.n_cells();
    let centers = grid.centers();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = centers[i] - centers[j];
            cost[i * n + j] = d * d;
        }
    }
    cost
}

/// The annealing ladder of kernel scales, ending exactly at `target`.
fn eps_schedule(length: f64, target: f64, warm: bool) -> Vec<f64> {
    let cold_start = 0.25 * length * length;
    let start = if warm {
        (WARM_RAMP[0] * target).min(cold_start)
    } else {
        cold_start
    };
    let mut schedule = Vec::new();
    let mut eps = start;
    while eps > target * 1.0001 {
        schedule.push(eps);
        eps *= 0.5;
    }
    schedule.push(target);
    schedule
}

/// Trapezoid primitive of -potential_grad between cell centers: the
/// Kantorovich potential (up to an additive constant) of the exact map, since
/// d phi / dx = (id - T) = -potential_grad.
fn potential_primitive(potential_grad: &[f64], h: f64) -> Vec<f64> {
    let mut u = vec![0.0; potential_grad.len()];
    for i in 1..u.len() {
        u[i] = u[i - 1] - 0.5 * h * (potential_grad[i - 1] + potential_grad[i]);
    }
    u
}

/// Dense linear solve by Gaussian elimination with partial pivoting.
/// `a` is row-major n x n and is destroyed; `rhs` is overwritten with the
/// solution.
fn solve_dense(a: &mut [f64], rhs: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in (col + 1)..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best > 0.0 && best.is_finite()) {
            return Err(Error::RootFind("singular polish system"));
        }
        if piv != col {
            for c in col..n {
                a.swap(col * n + c, piv * n + c);
            }
            rhs.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            a[r * n + col] = 0.0;
            for c in (col + 1)..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = rhs[col];
        for c in (col + 1)..n {
            v -= a[col * n + c] * rhs[c];
        }
        rhs[col] = v / a[col * n + col];
    }
    Ok(())
}

/// Vacuum threshold (fraction of the uniform density): below this in both
/// the state and the anchor, quantile positions are float-noise-limited and
/// the cell is frozen out of the polish system.
const POLISH_VACUUM_FRAC: f64 = 1e-12;

/// Hard cap on polish Newton iterations.
const POLISH_MAX_ITER: usize = 60;

/// Central-difference step (in log mass) for the polish transport Jacobian.
const POLISH_FD_STEP: f64 = 1e-6;

/// Newton-tier threshold (fraction of the uniform density): cells below it
/// are too transport-stiff to share a line search with the bulk and go to
/// the scalar fringe pass instead.
const POLISH_NEWTON_FRAC: f64 = 1e-5;

/// Trial budget for one fringe cell's scalar solve.
const POLISH_FRINGE_TRIALS: usize = 100;

/// Largest depth (in log mass) a live cell's warm start may sit below its
/// anchor when the polish begins.  One proximal step moves tail quantiles by
/// O(tau_eff * |grad f|) cells, a few e-folds of mass, so an equilibrium
/// dozens of e-folds under the anchor is an artifact of a warm start
/// inherited from a longer step; left in place it stretches quantile bands
/// across the dead zone and poisons the Kantorovich field everywhere.
const POLISH_ANCHOR_SLACK: f64 = 15.0;

/// Budget of Gauss-Seidel coordinate sweeps a polish may spend breaking
/// line-search stalls before it settles for the loose exit.
const POLISH_MAX_SWEEPS: usize = 6;

/// Everything one residual evaluation of the polish system produces.
struct PolishEval {
    res: Vec<f64>,
    /// Sup of the residual over supported cells (those the reported
    /// diagnostics can see).
    sup: f64,
    /// Cell and species (0 = rho, 1 = mu) attaining `sup`.
    sup_at: (usize, usize),
    /// Squared residual norm over Newton-tier cells, weighted by the masses
    /// frozen at polish entry; the line search merit.
    norm2: f64,
    mass_rho: Vec<f64>,
    mass_mu: Vec<f64>,
}

/// Sharp-kernel finisher (see module docs) for one penalized step: solves
/// the discrete optimality system
///     f_a(p, q) + u_rho / tau = kappa_rho,
///     f_b(p, q) + u_mu  / tau = kappa_mu,
/// in log cell masses, where u is the trapezoid primitive of (id - T) and T
/// the exact quantile map back to the anchor -- the same Euler-Lagrange
/// fields whose weighted spread `optimality_residual` reports.
///
/// The cells are split into three tiers by how stiff their transport
/// response is (the sensitivity of u to an upstream mass scales like the
/// inverse anchor density 1 / a(T), which spans ~30 orders of magnitude):
///
/// * Newton tier (density above ~1e-5 of uniform): the actual unknowns of a
///   damped Newton iteration with two mass-constraint borders and
///   multiplier columns.
/// * Fringe tier (down to the vacuum threshold): transport-stiff cells
///   whose valid step length is microscopic compared to the bulk's, so they
///   cannot share a line search with it.  They are eliminated nonlinearly:
///   every residual evaluation first re-equilibrates each fringe cell's own
///   monotone scalar equation by an ascending safeguarded pass (u sees only
///   upstream masses, so one pass per species resolves the triangular
///   chain).  The Newton iteration never sees fringe unknowns, only the
///   smooth composite map they induce on the bulk.
/// * Frozen tier (below vacuum in both state and anchor): quantile
///   positions respond to float-rounding of upstream partial sums amplified
///   by 1 / a (up to ~1e25), so displacements there carry no information.
///   Their displacement is masked to zero before integrating u (for cells
///   past the vacuum this only shifts u by a constant, which the multiplier
///   absorbs) and they are closed explicitly at the end from their own
///   optimality equation at the converged multiplier.
///
/// The Jacobian of the composite map is built by central differences: one
/// perturbed fringe-pass-plus-residual evaluation per Newton column.  A
/// differenced column automatically carries everything the discrete system
/// really does -- envelope curvature, within-cell averaging,
/// renormalization, fringe feedback, steep tails -- where a closed-form
/// 1 / a(T) model proved O(1)-wrong across exponential fringes.
///
/// The tight tolerance is enforced on supported cells (above the diagnostic
/// mass floor); if the residual floor set by tail quantile noise is hit
/// first, the solve accepts once below a loose tolerance that is still far
/// inside every reported margin.
fn newton_polish(
    oracle: &EnvelopeOracle,
    cfg: &JkoConfig,
    anchor: &DensityPair,
    tau_eff: f64,
    p: &mut [f64],
    q: &mut [f64],
) -> Result<usize> {
    let grid = anchor.grid();
    let n = grid.n_cells();
    let h = grid.h();
    let ln_h = h.ln();
    let vacuum = POLISH_VACUUM_FRAC / grid.length();
    let newton_floor = POLISH_NEWTON_FRAC / grid.length();
    let support_floor = cfg.mass_floor(grid);

    // Tier assignment, fixed for the whole polish so the residual map stays
    // smooth across iterations -- except that fringe cells whose equilibrium
    // falls below the float-absorption scale of a unit-total cumulative sum
    // (where transport carries no information) are demoted to the frozen
    // tier between iterations.
    let av = anchor.rho.values();
    let bv = anchor.mu.values();
    let mask_rho: Vec<bool> = (0..n).map(|i| p[i] >= vacuum || av[i] >= vacuum).collect();
    let mask_mu: Vec<bool> = (0..n).map(|i| q[i] >= vacuum || bv[i] >= vacuum).collect();
    let supp_rho: Vec<bool> = (0..n)
        .map(|i| p[i].max(av[i]) >= support_floor)
        .collect();
    let supp_mu: Vec<bool> = (0..n)
        .map(|i| q[i].max(bv[i]) >= support_floor)
        .collect();
    let newt_rho: Vec<usize> = (0..n)
        .filter(|&i| mask_rho[i] && p[i].max(av[i]) >= newton_floor)
        .collect();
    let newt_mu: Vec<usize> = (0..n)
        .filter(|&i| mask_mu[i] && q[i].max(bv[i]) >= newton_floor)
        .collect();
    let fringe_rho: Vec<usize> = (0..n)
        .filter(|&i| mask_rho[i] && !(p[i].max(av[i]) >= newton_floor))
        .collect();
    let fringe_mu: Vec<usize> = (0..n)
        .filter(|&i| mask_mu[i] && !(q[i].max(bv[i]) >= newton_floor))
        .collect();
    let n_fringe = (fringe_rho.len(), fringe_mu.len());
    struct Tiers {
        mask_rho: Vec<bool>,
        mask_mu: Vec<bool>,
        fringe_rho: Vec<usize>,
        fringe_mu: Vec<usize>,
    }
    let tiers = std::cell::RefCell::new(Tiers {
        mask_rho,
        mask_mu,
        fringe_rho,
        fringe_mu,
    });
    // Normalized log masses below ulp(1) are invisible to the cumulative
    // sums the quantile solve differences; equilibria there are spurious.
    let absorb_log = f64::EPSILON.ln();
    // Fringe equilibria live near or below the Newton-tier boundary by
    // construction (a tail cell gains at most a few e-folds per step); a walk
    // far past this cap is chasing the spurious large-mass root that the
    // normalized gauge admits when the multiplier is still far off.
    let fringe_cap = (newton_floor * h).ln() + 5.0;
    let in_newt_rho: Vec<bool> = {
        let mut f = vec![false; n];
        for &i in &newt_rho {
            f[i] = true;
        }
        f
    };
    let in_newt_mu: Vec<bool> = {
        let mut f = vec![false; n];
        for &i in &newt_mu {
            f[i] = true;
        }
        f
    };
    // Line-search weights frozen at entry: weighting by the running masses
    // would let a step "improve" the norm by annihilating a cell (its weight
    // collapses with it), so the merit must remember how much mass a cell is
    // supposed to carry.
    let refw_rho: Vec<f64> = (0..n).map(|i| p[i].max(av[i]) * h).collect();
    let refw_mu: Vec<f64> = (0..n).map(|i| q[i].max(bv[i]) * h).collect();
    let nr = newt_rho.len();
    let nm = newt_mu.len();
    if nr == 0 || nm == 0 {
        return Err(Error::Domain("polish requires non-vacuum densities"));
    }
    let dim = nr + nm + 2;

    // Log cell masses, shifted so each species has exactly unit mass.
    let to_log_mass = |vals: &[f64]| -> Vec<f64> {
        let mut v: Vec<f64> = vals.iter().map(|&x| (x.max(1e-300) * h).ln()).collect();
        let shift = logsumexp(&v);
        for vi in &mut v {
            *vi -= shift;
        }
        v
    };
    let mut v = to_log_mass(p);
    let mut w = to_log_mass(q);
    // Anchor log masses in the same unit-total gauge; they floor the tails
    // both at entry and inside the fringe solve below.
    let anchor_lv = to_log_mass(av);
    let anchor_lw = to_log_mass(bv);
    // Lift warm-start tails onto the anchor's tail: no live cell starts more
    // than POLISH_ANCHOR_SLACK e-folds below its anchor mass (the fringe
    // solve walks a cell back down cheaply when it genuinely drains, but a
    // start dozens of e-folds low makes every residual in the system lie).
    {
        let t = tiers.borrow();
        for i in 0..n {
            if t.mask_rho[i] {
                v[i] = v[i].max(anchor_lv[i] - POLISH_ANCHOR_SLACK);
            }
            if t.mask_mu[i] {
                w[i] = w[i].max(anchor_lw[i] - POLISH_ANCHOR_SLACK);
            }
        }
    }

    // The masked Kantorovich field u for one species at given log masses.
    // Built on the mean displacement, whose primitive is the exact partial
    // derivative of the transport term in the cell masses; the signed-rms
    // aggregation agrees when within-cell displacement is nearly constant but
    // jumps at mixed-sign cells, which in the sharp regime (displacements
    // well under a cell) puts artificial discontinuities through every
    // residual this solve drives to zero.
    let u_field = |logs: &[f64], target: &Density, mask: &[bool]| -> Result<Vec<f64>> {
        let dens = Density::from_unnormalized(
            grid,
            logs.iter().map(|&x| x.exp() / h).collect(),
        )?;
        let tr = transport::quantile_w2(&dens, target)?;
        let pg: Vec<f64> = tr
            .mean_disp
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Ok(potential_primitive(&pg, h))
    };
    // Everything downstream must see the same normalized densities the
    // transport solve sees, so log densities are gauged by the total mass.
    let ln_tot = |logs: &[f64]| logsumexp(logs);

    // One species' residual at a trial log mass for a single fringe cell.
    let fringe_residual = |logs: &[f64],
                           species: usize,
                           i: usize,
                           other_ln_dens: f64,
                           kappa: f64|
     -> Result<f64> {
        let t = tiers.borrow();
        let (target, mask) = if species == 0 {
            (&anchor.rho, &t.mask_rho)
        } else {
            (&anchor.mu, &t.mask_mu)
        };
        let u = u_field(logs, target, mask)?;
        let own = logs[i] - ln_tot(logs) - ln_h;
        let (fa, fb, ..) = if species == 0 {
            grad_in_log(oracle, own, other_ln_dens)
        } else {
            grad_in_log(oracle, other_ln_dens, own)
        };
        let g = if species == 0 { fa } else { fb };
        Ok(g + u[i] / tau_eff - kappa)
    };

    // Ascending elimination pass: solve each fringe cell's own equation in
    // its own log mass.  The residual is increasing in it with slope >= ~1
    // away from grid-crossing kinks, so |r| bounds the distance to the
    // root; a bracketed bisection guards the Newton-style step.
    let fringe_pass = |v: &mut [f64], w: &mut [f64], kr: f64, km: f64, ftol: f64| -> Result<()> {
        for species in 0..2usize {
            let (fringe, kappa) = {
                let t = tiers.borrow();
                if species == 0 {
                    (t.fringe_rho.clone(), kr)
                } else {
                    (t.fringe_mu.clone(), km)
                }
            };
            if fringe.is_empty() {
                continue;
            }
            let lt_other = if species == 0 { ln_tot(w) } else { ln_tot(v) };
            for &i in &fringe {
                // A fringe cell may not equilibrate arbitrarily far below its
                // anchor: one proximal step moves tail quantiles by a few
                // cells at most, and a deeper "root" only exists when the
                // multiplier estimate is transiently poisoned.  Chasing it
                // stretches this cell's quantile bands across the dead zone,
                // which corrupts the Kantorovich field of every other cell
                // and locks the whole polish into the poisoned basin.
                let z_floor = ((if species == 0 {
                    anchor_lv[i]
                } else {
                    anchor_lw[i]
                }) - POLISH_ANCHOR_SLACK)
                    .max(-746.0);
                let other = if species == 0 {
                    w[i] - lt_other - ln_h
                } else {
                    v[i] - lt_other - ln_h
                };
                let logs: &mut [f64] = if species == 0 { &mut *v } else { &mut *w };
                let mut z = logs[i];
                let eval_at = |logs: &mut [f64], z: f64| -> Result<f64> {
                    let old = logs[i];
                    logs[i] = z;
                    let r = fringe_residual(logs, species, i, other, kappa);
                    logs[i] = old;
                    r
                };
                let mut r = eval_at(logs, z)?;
                // The solve may end on a transport kink with no exact root,
                // so remember the best point seen.
                let (mut best_z, mut best_r) = (z, r);
                // Endpoints with known residual sign: the residual increases
                // in z away from kinks, so r > 0 bounds the root from above
                // and r < 0 from below.  The bracket is grown by expanding
                // strides first — the slope can dip below one, so a fixed
                // |r|-sized window can just miss the root and pin the solve
                // to its own edge.
                let (mut z_lo, mut z_hi) = (f64::NAN, f64::NAN);
                if r > 0.0 {
                    z_hi = z;
                } else {
                    z_lo = z;
                }
                let mut stride = 1.25 * r.abs().max(1e-3);
                for _ in 0..POLISH_FRINGE_TRIALS {
                    if best_r.abs() <= ftol {
                        break;
                    }
                    let zn = if z_lo.is_nan() {
                        let c = (z_hi - stride).max(z_floor);
                        if c >= z_hi {
                            break;
                        }
                        c
                    } else if z_hi.is_nan() {
                        let c = (z_lo + stride).min(fringe_cap);
                        if c <= z_lo {
                            break;
                        }
                        c
                    } else if z_hi - z_lo <= f64::EPSILON * (1.0 + z.abs()) {
                        break;
                    } else {
                        let c = z - r;
                        if c > z_lo && c < z_hi {
                            c
                        } else {
                            0.5 * (z_lo + z_hi)
                        }
                    };
                    stride *= 2.0;
                    let rn = eval_at(logs, zn)?;
                    if rn > 0.0 {
                        z_hi = zn;
                    } else {
                        z_lo = zn;
                    }
                    z = zn;
                    r = rn;
                    if rn.abs() < best_r.abs() {
                        best_z = zn;
                        best_r = rn;
                    }
                }
                logs[i] = best_z.max(-745.0);
            }
        }
        Ok(())
    };

    // Gauss-Seidel stall-breaker: re-solve each Newton row's residual in its
    // own log mass with everything else frozen.  No Jacobian enters, so the
    // solve brackets straight across the quantile-binning kinks that
    // invalidate a differenced direction near a kink; false position handles
    // the steep transport slopes of heavy rows, and equilibria stay within
    // the proximal travel bound around the anchor.
    let relax_sweep = |v: &mut [f64], w: &mut [f64], kr: f64, km: f64, ftol: f64| -> Result<()> {
        for species in 0..2usize {
            let (rows, kappa) = if species == 0 {
                (&newt_rho, kr)
            } else {
                (&newt_mu, km)
            };
            let lt_other = if species == 0 { ln_tot(w) } else { ln_tot(v) };
            for &i in rows.iter() {
                let anchor_z = if species == 0 {
                    anchor_lv[i]
                } else {
                    anchor_lw[i]
                };
                let mut z_floor = (anchor_z - POLISH_ANCHOR_SLACK).max(-746.0);
                let mut z_cap = (anchor_z + POLISH_ANCHOR_SLACK).min(0.0);
                let other = if species == 0 {
                    w[i] - lt_other - ln_h
                } else {
                    v[i] - lt_other - ln_h
                };
                let logs: &mut [f64] = if species == 0 { &mut *v } else { &mut *w };
                let mut z = logs[i].clamp(z_floor, z_cap);
                // Bounded travel: a row whose own-slope is kink-inverted sees
                // its residual move away from zero in the walk direction and
                // would chase a phantom root to the caps, wrecking the
                // iterate for every other row.  A few e-folds per sweep is
                // enough for real roots; phantom chasers park at their entry.
                z_floor = z_floor.max(z - 3.0);
                z_cap = z_cap.min(z + 3.0);
                let eval_at = |logs: &mut [f64], z: f64| -> Result<f64> {
                    let old = logs[i];
                    logs[i] = z;
                    let r = fringe_residual(logs, species, i, other, kappa);
                    logs[i] = old;
                    r
                };
                let mut r = eval_at(logs, z)?;
                let (mut best_z, mut best_r) = (z, r);
                let (mut z_lo, mut z_hi) = (f64::NAN, f64::NAN);
                let (mut r_lo, mut r_hi) = (f64::NAN, f64::NAN);
                if r > 0.0 {
                    z_hi = z;
                    r_hi = r;
                } else {
                    z_lo = z;
                    r_lo = r;
                }
                let mut stride = 1.25 * r.abs().max(10.0 * ftol);
                for _ in 0..POLISH_FRINGE_TRIALS {
                    if best_r.abs() <= ftol {
                        break;
                    }
                    let zn = if z_lo.is_nan() {
                        let c = (z_hi - stride).max(z_floor);
                        if c >= z_hi {
                            break;
                        }
                        c
                    } else if z_hi.is_nan() {
                        let c = (z_lo + stride).min(z_cap);
                        if c <= z_lo {
                            break;
                        }
                        c
                    } else if z_hi - z_lo <= f64::EPSILON * (1.0 + z.abs()) {
                        break;
                    } else {
                        let width = z_hi - z_lo;
                        let c = z_hi - r_hi * width / (r_hi - r_lo);
                        if c > z_lo + 0.01 * width && c < z_hi - 0.01 * width {
                            c
                        } else {
                            0.5 * (z_lo + z_hi)
                        }
                    };
                    stride *= 2.0;
                    let rn = eval_at(logs, zn)?;
                    if rn > 0.0 {
                        z_hi = zn;
                        r_hi = rn;
                    } else {
                        z_lo = zn;
                        r_lo = rn;
                    }
                    z = zn;
                    r = rn;
                    if rn.abs() < best_r.abs() {
                        best_z = zn;
                        best_r = rn;
                    }
                }
                logs[i] = best_z;
            }
        }
        Ok(())
    };

    let eval = |v: &[f64], w: &[f64], kr: f64, km: f64| -> Result<PolishEval> {
        let t = tiers.borrow();
        let u_rho = u_field(v, &anchor.rho, &t.mask_rho)?;
        let u_mu = u_field(w, &anchor.mu, &t.mask_mu)?;
        let lt_v = ln_tot(v);
        let lt_w = ln_tot(w);
        let mass_rho: Vec<f64> = v.iter().map(|&x| (x - lt_v).exp()).collect();
        let mass_mu: Vec<f64> = w.iter().map(|&x| (x - lt_w).exp()).collect();
        let mut res = vec![0.0; 2 * n];
        let mut sup = 0.0_f64;
        let mut sup_at = (0usize, 0usize);
        let mut norm2 = 0.0;
        for i in 0..n {
            let (fa, fb, ..) = grad_in_log(oracle, v[i] - lt_v - ln_h, w[i] - lt_w - ln_h);
            let r1 = fa + u_rho[i] / tau_eff - kr;
            let r2 = fb + u_mu[i] / tau_eff - km;
            if t.mask_rho[i] && !r1.is_finite() || t.mask_mu[i] && !r2.is_finite() {
                return Err(Error::ProxFailure {
                    cell: i,
                    detail: "polish residual is not finite",
                });
            }
            res[i] = r1;
            res[n + i] = r2;
            if supp_rho[i] && r1.abs() > sup {
                sup = r1.abs();
                sup_at = (i, 0);
            }
            if supp_mu[i] && r2.abs() > sup {
                sup = r2.abs();
                sup_at = (i, 1);
            }
            if in_newt_rho[i] {
                norm2 += refw_rho[i] * r1 * r1;
            }
            if in_newt_mu[i] {
                norm2 += refw_mu[i] * r2 * r2;
            }
        }
        Ok(PolishEval {
            res,
            sup,
            sup_at,
            norm2,
            mass_rho,
            mass_mu,
        })
    };

    // Composite evaluation: eliminate the fringe, then evaluate.  `v`/`w`
    // keep the equilibrated fringe values.
    let composite = |v: &mut [f64], w: &mut [f64], kr: f64, km: f64, ftol: f64| -> Result<PolishEval> {
        fringe_pass(v, w, kr, km, ftol)?;
        eval(v, w, kr, km)
    };

    // Multipliers start at the mass-weighted means of the raw fields (from a
    // plain evaluation: the fringe must not equilibrate toward kappa = 0).
    let cur0 = eval(&v, &w, 0.0, 0.0)?;
    let weighted_mean = |res: &[f64], mass: &[f64], sys: &[usize]| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in sys {
            num += mass[i] * res[i];
            den += mass[i];
        }
        num / den
    };
    let mut kr = weighted_mean(&cur0.res[..n], &cur0.mass_rho, &newt_rho);
    let mut km = weighted_mean(&cur0.res[n..], &cur0.mass_mu, &newt_mu);
    let ftol_of = |kr: f64, km: f64| {
        0.5 * 100.0 * cfg.prox_newton_tol * (1.0 + kr.abs() + km.abs())
    };
    // Demote fringe cells whose equilibrated mass fell below absorption;
    // returns whether the tier layout changed.  Only cells with sub-vacuum
    // anchors qualify: a cell with real anchor mass cannot legitimately
    // equilibrate at absorption scale in one step (early multiplier error
    // can park it there transiently, and it must be free to come back).
    let demote = |v: &[f64], w: &[f64]| -> bool {
        let mut t = tiers.borrow_mut();
        let Tiers {
            mask_rho,
            mask_mu,
            fringe_rho,
            fringe_mu,
        } = &mut *t;
        let mut changed = false;
        fringe_rho.retain(|&i| {
            if v[i] < absorb_log && av[i] < vacuum {
                mask_rho[i] = false;
                changed = true;
                false
            } else {
                true
            }
        });
        fringe_mu.retain(|&i| {
            if w[i] < absorb_log && bv[i] < vacuum {
                mask_mu[i] = false;
                changed = true;
                false
            } else {
                true
            }
        });
        changed
    };
    let mut cur = composite(&mut v, &mut w, kr, km, ftol_of(kr, km))?;
    if demote(&v, &w) {
        cur = composite(&mut v, &mut w, kr, km, ftol_of(kr, km))?;
    }
    let trace = std::env::var_os("JKO_TRACE").is_some();
    if trace {
        eprintln!(
            "polish entry sup {:.6e} @({},{}) norm2 {:.6e} newton {nr}+{nm} fringe {}+{}",
            cur.sup, cur.sup_at.0, cur.sup_at.1, cur.norm2, n_fringe.0, n_fringe.1
        );
    }

    let mut iters = 0usize;
    let mut best_sup = f64::INFINITY;
    let mut no_gain = 0usize;
    let mut sweeps = 0usize;
    loop {
        let scale = 1.0 + kr.abs() + km.abs();
        let tol_tight = 100.0 * cfg.prox_newton_tol * scale;
        let tol_loose = 1e7 * cfg.prox_newton_tol * scale;
        if cur.sup <= tol_tight {
            break;
        }
        // Quantile cumulative sums quantize near total mass, which floors
        // the residual on supported tail cells; once progress on the sup
        // stalls there, further Newton iterations only grind at that floor.
        if cur.sup < 0.5 * best_sup {
            no_gain = 0;
        } else {
            no_gain += 1;
        }
        best_sup = best_sup.min(cur.sup);
        if no_gain >= 4 && cur.sup <= tol_loose {
            break;
        }
        if iters >= POLISH_MAX_ITER {
            if cur.sup <= tol_loose {
                break;
            }
            return Err(Error::ScalingNotConverged {
                iters,
                marginal_error: cur.sup,
                tol: tol_tight,
            });
        }
        iters += 1;
        let ftol = ftol_of(kr, km);

        // Bordered Newton system on [dv(newt); dw(newt); dkappa_rho; dkappa_mu],
        // with one differenced composite column per unknown.
        let build_system = |fd: f64,
                            v: &[f64],
                            w: &[f64],
                            kr: f64,
                            km: f64,
                            cur: &PolishEval|
         -> Result<(Vec<f64>, Vec<f64>)> {
            let mut a = vec![0.0; dim * dim];
            let mut rhs = vec![0.0; dim];
            for (cj, &j) in newt_rho.iter().enumerate() {
                let mut vp = v.to_vec();
                let mut wp = w.to_vec();
                vp[j] = v[j] + fd;
                let ep = composite(&mut vp, &mut wp, kr, km, ftol)?;
                let mut vm = v.to_vec();
                let mut wm = w.to_vec();
                vm[j] = v[j] - fd;
                let em = composite(&mut vm, &mut wm, kr, km, ftol)?;
                let s = 1.0 / (2.0 * fd);
                for (ri, &i) in newt_rho.iter().enumerate() {
                    a[ri * dim + cj] = (ep.res[i] - em.res[i]) * s;
                }
                for (ri, &i) in newt_mu.iter().enumerate() {
                    a[(nr + ri) * dim + cj] = (ep.res[n + i] - em.res[n + i]) * s;
                }
            }
            for (cj, &j) in newt_mu.iter().enumerate() {
                let mut vp = v.to_vec();
                let mut wp = w.to_vec();
                wp[j] = w[j] + fd;
                let ep = composite(&mut vp, &mut wp, kr, km, ftol)?;
                let mut vm = v.to_vec();
                let mut wm = w.to_vec();
                wm[j] = w[j] - fd;
                let em = composite(&mut vm, &mut wm, kr, km, ftol)?;
                let s = 1.0 / (2.0 * fd);
                for (ri, &i) in newt_rho.iter().enumerate() {
                    a[ri * dim + nr + cj] = (ep.res[i] - em.res[i]) * s;
                }
                for (ri, &i) in newt_mu.iter().enumerate() {
                    a[(nr + ri) * dim + nr + cj] = (ep.res[n + i] - em.res[n + i]) * s;
                }
            }
            // Multiplier columns — also differenced through the composite:
            // the eliminated fringe re-equilibrates against a shifted
            // multiplier, and that feedback reaches the Newton rows just
            // downstream through the potential, so the direct -1 alone is
            // wrong there.
            for col_species in 0..2usize {
                let col = nr + nm + col_species;
                let dk = fd * (1.0 + kr.abs().max(km.abs()));
                let (krp, kmp, krm, kmm) = if col_species == 0 {
                    (kr + dk, km, kr - dk, km)
                } else {
                    (kr, km + dk, kr, km - dk)
                };
                let mut vp = v.to_vec();
                let mut wp = w.to_vec();
                let ep = composite(&mut vp, &mut wp, krp, kmp, ftol)?;
                let mut vm = v.to_vec();
                let mut wm = w.to_vec();
                let em = composite(&mut vm, &mut wm, krm, kmm, ftol)?;
                let s = 1.0 / (2.0 * dk);
                for (ri, &i) in newt_rho.iter().enumerate() {
                    a[ri * dim + col] = (ep.res[i] - em.res[i]) * s;
                }
                for (ri, &i) in newt_mu.iter().enumerate() {
                    a[(nr + ri) * dim + col] = (ep.res[n + i] - em.res[n + i]) * s;
                }
            }
            for (ri, &i) in newt_rho.iter().enumerate() {
                rhs[ri] = -cur.res[i];
            }
            for (ri, &i) in newt_mu.iter().enumerate() {
                rhs[nr + ri] = -cur.res[n + i];
            }
            for (cj, &j) in newt_rho.iter().enumerate() {
                a[(nr + nm) * dim + cj] = cur.mass_rho[j];
            }
            for (cj, &j) in newt_mu.iter().enumerate() {
                a[(nr + nm + 1) * dim + nr + cj] = cur.mass_mu[j];
            }
            Ok((a, rhs))
        };

        // The residual map is piecewise in the quantile binning; a central
        // difference at the base scale measures the local facet's slope,
        // which near a kink can point the whole direction uphill.  On
        // line-search failure the system is rebuilt at secant scale — the
        // coarser difference averages the response across the kinks the
        // step must cross, which is the linear model the line search
        // actually needs.
        let mut step = vec![0.0; dim];
        let mut accepted = false;
        let mut t = 0.0_f64;
        'fd_ladder: for fd in [POLISH_FD_STEP, 1e-4, 1e-3] {
            let (a, rhs) = build_system(fd, &v, &w, kr, km, &cur)?;

            // Solve, retrying with a growing ridge if the system degenerates.
            let mut ridge = 0.0_f64;
            let solved = loop {
                let mut mat = a.clone();
                if ridge > 0.0 {
                    for i in 0..nr + nm {
                        let d = mat[i * dim + i];
                        mat[i * dim + i] = d + ridge * (1.0 + d.abs());
                    }
                }
                step.copy_from_slice(&rhs);
                match solve_dense(&mut mat, &mut step, dim) {
                    Ok(()) if step.iter().all(|x| x.is_finite()) => break true,
                    _ => {
                        ridge = if ridge == 0.0 { 1e-10 } else { ridge * 100.0 };
                        if ridge > 1.0 {
                            break false;
                        }
                    }
                }
            };
            if !solved {
                return Err(Error::RootFind("polish Newton system is singular"));
            }

            // Cap the log step, then backtrack on the Newton-tier weighted
            // norm.
            let mut largest = 0.0_f64;
            for x in &step[..nr + nm] {
                largest = largest.max(x.abs());
            }
            let full = if largest > 30.0 { 30.0 / largest } else { 1.0 };
            t = full;
            while t >= full * 2f64.powi(-30) {
                let mut vt = v.clone();
                let mut wt = w.clone();
                for (ri, &i) in newt_rho.iter().enumerate() {
                    vt[i] = (v[i] + t * step[ri]).max(-700.0);
                }
                for (ri, &i) in newt_mu.iter().enumerate() {
                    wt[i] = (w[i] + t * step[nr + ri]).max(-700.0);
                }
                let krt = kr + t * step[nr + nm];
                let kmt = km + t * step[nr + nm + 1];
                match composite(&mut vt, &mut wt, krt, kmt, ftol_of(krt, kmt)) {
                    Ok(cand) if cand.norm2.is_finite() && cand.norm2 < cur.norm2 => {
                        v = vt;
                        w = wt;
                        kr = krt;
                        km = kmt;
                        cur = cand;
                        if demote(&v, &w) {
                            cur = composite(&mut v, &mut w, kr, km, ftol_of(kr, km))?;
                        }
                        accepted = true;
                        break 'fd_ladder;
                    }
                    _ => t *= 0.5,
                }
            }
        }
        // Near a binning kink the differenced direction can point uphill at
        // every step length; a coordinate sweep crosses the kink without a
        // Jacobian and hands the next iteration a strictly better point.
        // Below the loose tolerance the stall exit handles the noise floor.
        if !accepted && sweeps < POLISH_MAX_SWEEPS && cur.sup > tol_loose {
            sweeps += 1;
            let mut vs = v.clone();
            let mut ws = w.clone();
            relax_sweep(&mut vs, &mut ws, kr, km, ftol)?;
            let swept = composite(&mut vs, &mut ws, kr, km, ftol)?;
            if trace {
                eprintln!(
                    "polish sweep try {sweeps}: sup {:.6e} norm2 {:.6e} (cur sup {:.6e} norm2 {:.6e})",
                    swept.sup, swept.norm2, cur.sup, cur.norm2
                );
            }
            if swept.norm2.is_finite() && (swept.norm2 < cur.norm2 || swept.sup < cur.sup) {
                v = vs;
                w = ws;
                cur = swept;
                if demote(&v, &w) {
                    cur = composite(&mut v, &mut w, kr, km, ftol)?;
                }
                no_gain = 0;
                accepted = true;
                if trace {
                    eprintln!(
                        "polish sweep {sweeps} sup {:.6e} norm2 {:.6e}",
                        cur.sup, cur.norm2
                    );
                }
            }
        }
        if trace {
            eprintln!(
                "polish iter {iters} sup {:.6e} @({},{}) norm2 {:.6e} t {t:.3e}",
                cur.sup, cur.sup_at.0, cur.sup_at.1, cur.norm2
            );
        }
        if std::env::var_os("JKO_TRACE2").is_some() {
            {
                let t2 = tiers.borrow();
                let row_of = |i: usize, sp: usize| -> (f64, f64, f64, char) {
                    let (z, anc, wgt, mask, fr) = if sp == 0 {
                        (
                            v[i],
                            av[i] * h,
                            refw_rho[i],
                            t2.mask_rho[i],
                            t2.fringe_rho.contains(&i),
                        )
                    } else {
                        (
                            w[i],
                            bv[i] * h,
                            refw_mu[i],
                            t2.mask_mu[i],
                            t2.fringe_mu.contains(&i),
                        )
                    };
                    let tier = if fr {
                        'F'
                    } else if mask {
                        'N'
                    } else {
                        'Z'
                    };
                    (z, anc.ln(), wgt, tier)
                };
                let mut rows: Vec<(f64, usize, usize)> = Vec::new();
                for &i in &newt_rho {
                    rows.push((refw_rho[i] * cur.res[i] * cur.res[i], i, 0));
                }
                for &i in &newt_mu {
                    rows.push((refw_mu[i] * cur.res[n + i] * cur.res[n + i], i, 1));
                }
                rows.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
                eprintln!(
                    "  kr {kr:.6} km {km:.6} step_kr {:+.3e} step_km {:+.3e}",
                    step[nr + nm],
                    step[nr + nm + 1]
                );
                for &(c, i, sp) in rows.iter().take(6) {
                    let (z, anc, wgt, tier) = row_of(i, sp);
                    let r = if sp == 0 { cur.res[i] } else { cur.res[n + i] };
                    eprintln!(
                        "  row ({i},{sp},{tier}) res {r:+.4e} z {z:.2} anc {anc:.2} w {wgt:.2e} \
                         contrib {c:.3e}"
                    );
                }
                let (wi, ws) = cur.sup_at;
                let step_of = |i: usize, sp: usize| -> f64 {
                    if sp == 0 {
                        newt_rho
                            .iter()
                            .position(|&j| j == i)
                            .map_or(f64::NAN, |ri| step[ri])
                    } else {
                        newt_mu
                            .iter()
                            .position(|&j| j == i)
                            .map_or(f64::NAN, |ri| step[nr + ri])
                    }
                };
                for i in wi.saturating_sub(3)..=(wi + 3).min(n - 1) {
                    let (z, anc, wgt, tier) = row_of(i, ws);
                    let r = if ws == 0 { cur.res[i] } else { cur.res[n + i] };
                    eprintln!(
                        "  nb ({i},{ws},{tier}) z {z:.3} anc {anc:.3} res {r:+.3e} w {wgt:.1e} \
                         step {:+.3e}",
                        step_of(i, ws)
                    );
                }
                for sp in 0..2usize {
                    let list = if sp == 0 { &newt_rho } else { &newt_mu };
                    let comps: Vec<f64> = list.iter().map(|&i| step_of(i, sp)).collect();
                    let mx = comps.iter().cloned().fold(f64::MIN, f64::max);
                    let mn = comps.iter().cloned().fold(f64::MAX, f64::min);
                    let imx = comps.iter().position(|&c| c == mx).map(|k| list[k]);
                    let imn = comps.iter().position(|&c| c == mn).map(|k| list[k]);
                    eprintln!(
                        "  step[{sp}] min {mn:+.3e} @{imn:?} max {mx:+.3e} @{imx:?}"
                    );
                }
                for &i in [33usize, 34, 35, 36, 37, 38].iter() {
                    let (z, anc, _, tier) = row_of(i, 1);
                    eprintln!(
                        "  peak ({i},1,{tier}) z {z:.4} anc {anc:.4} res {:+.3e} step {:+.3e}",
                        cur.res[n + i],
                        step_of(i, 1)
                    );
                }
                for sp in 0..2usize {
                    let line: Vec<String> = (0..n)
                        .map(|i| {
                            let r = cur.res[sp * n + i];
                            let (_, _, wgt, tier) = row_of(i, sp);
                            format!("{i}{tier}:{r:+.2e}/{wgt:.0e}")
                        })
                        .collect();
                    eprintln!("  all[{sp}] {}", line.join(" "));
                }
                // Per-row residual profile in the row's own log mass, other
                // coordinates frozen (no fringe re-equilibration): slope sign,
                // root existence, kink structure.
                let lt_v = ln_tot(&v);
                let lt_w = ln_tot(&w);
                for &(i, sp) in &[
                    (20usize, 1usize),
                    (22, 1),
                    (25, 1),
                    (28, 0),
                    (31, 0),
                    (24, 0),
                    (26, 0),
                ] {
                    let other = if sp == 0 {
                        w[i] - lt_w - ln_h
                    } else {
                        v[i] - lt_v - ln_h
                    };
                    let kappa = if sp == 0 { kr } else { km };
                    let z0 = if sp == 0 { v[i] } else { w[i] };
                    let mut prof = String::new();
                    for k in -12..=12 {
                        let z = z0 + 0.25 * k as f64;
                        let r = {
                            let logs: &mut [f64] =
                                if sp == 0 { &mut v } else { &mut w };
                            let old = logs[i];
                            logs[i] = z;
                            let r = fringe_residual(logs, sp, i, other, kappa);
                            logs[i] = old;
                            r
                        };
                        match r {
                            Ok(r) => prof.push_str(&format!(" {r:+.3e}")),
                            Err(_) => prof.push_str(" ERR"),
                        }
                    }
                    eprintln!("  prof[{sp}]@{i} z0 {z0:+.2}:{prof}");
                }
            }
            for tp in [1e-2, 1e-1, 3e-1, 6e-1, 1e0] {
                let mut vt = v.clone();
                let mut wt = w.clone();
                for (ri, &i) in newt_rho.iter().enumerate() {
                    vt[i] = (v[i] + tp * step[ri]).max(-700.0);
                }
                for (ri, &i) in newt_mu.iter().enumerate() {
                    wt[i] = (w[i] + tp * step[nr + ri]).max(-700.0);
                }
                let krt = kr + tp * step[nr + nm];
                let kmt = km + tp * step[nr + nm + 1];
                match composite(&mut vt, &mut wt, krt, kmt, ftol_of(krt, kmt)) {
                    Ok(c) => {
                        let mut movers: Vec<(f64, usize, usize)> = Vec::new();
                        for &i in &newt_rho {
                            movers.push((
                                refw_rho[i] * (c.res[i] * c.res[i] - cur.res[i] * cur.res[i]),
                                i,
                                0,
                            ));
                        }
                        for &i in &newt_mu {
                            movers.push((
                                refw_mu[i]
                                    * (c.res[n + i] * c.res[n + i]
                                        - cur.res[n + i] * cur.res[n + i]),
                                i,
                                1,
                            ));
                        }
                        movers.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
                        let tops: Vec<String> = movers
                            .iter()
                            .take(3)
                            .map(|&(d, i, sp)| format!("({i},{sp}) {d:+.2e}"))
                            .collect();
                        eprintln!(
                            "  probe t {tp:.0e}: norm2 {:.6e} (cur {:.6e}) sup {:.3e} risers {}",
                            c.norm2,
                            cur.norm2,
                            c.sup,
                            tops.join(" ")
                        );
                    }
                    Err(e) => eprintln!("  probe t {tp:.0e}: error {e}"),
                }
            }
        }
        if !accepted {
            let scale = 1.0 + kr.abs() + km.abs();
            if cur.sup <= 1e7 * cfg.prox_newton_tol * scale {
                break;
            }
            return Err(Error::ScalingNotConverged {
                iters,
                marginal_error: cur.sup,
                tol: 100.0 * cfg.prox_newton_tol * scale,
            });
        }
    }

    // Close frozen vacuum cells from their own optimality equation.  Deep in
    // the B region f_a = ln p + q + 1 is linear in ln p with unit slope, and
    // a frozen cell's u does not depend on frozen masses, so one corrected
    // step `v -= res` lands exactly on f_a + u / tau = kappa; the cap keeps
    // closed cells below the vacuum threshold they were frozen at.
    let cap = (vacuum * h).ln();
    {
        let t = tiers.borrow();
        for i in 0..n {
            if !t.mask_rho[i] && cur.res[i].is_finite() {
                v[i] = (v[i] - cur.res[i]).min(cap).max(-745.0);
            }
            if !t.mask_mu[i] && cur.res[n + i].is_finite() {
                w[i] = (w[i] - cur.res[n + i]).min(cap).max(-745.0);
            }
        }
    }
    let mass_r: Vec<f64> = v.iter().map(|&x| x.exp()).collect();
    let mass_m: Vec<f64> = w.iter().map(|&x| x.exp()).collect();
    let tot_r = pairwise_sum(&mass_r);
    let tot_m = pairwise_sum(&mass_m);
    for i in 0..n {
        p[i] = mass_r[i] / tot_r / h;
        q[i] = mass_m[i] / tot_m / h;
    }
    Ok(iters)
}

/// Core minimizing-movement solve with penalty scale `tau_eff`; returns the
/// minimizer densities, the reusable duals, and the (scaling, polish)
/// iteration counts.
fn scaling_solve(
    oracle: &EnvelopeOracle,
    cfg: &JkoConfig,
    anchor: &DensityPair,
    tau_eff: f64,
    warm: Option<&ScalingDuals>,
) -> Result<(Vec<f64>, Vec<f64>, ScalingDuals, usize, usize)> {
    let grid = anchor.grid();
    let n = grid.n_cells();
    let h = grid.h();
    let ln_h = h.ln();
    let eps_target = 2.0 * tau_eff * cfg.eps_reg;
    // Plan couplings between adjacent cells carry a factor
    // exp(-h^2 / (4 eps)); below h^2/129 that is under 1e-14, the scaling
    // map's contraction has degenerated, and the regularized minimizer is
    // numerically identical to the exact-transport one, so the solve is
    // finished by the Newton polish instead of more sweeps.
    let sharp = eps_target < h * h / 129.0;

    let floor = cfg.mass_floor(grid) * 1e-3;
    let (mut p, mut q): (Vec<f64>, Vec<f64>) = match warm {
        Some(d) => (d.p.clone(), d.q.clone()),
        None => (
            anchor.rho.values().iter().map(|&v| v.max(floor)).collect(),
            anchor.mu.values().iter().map(|&v| v.max(floor)).collect(),
        ),
    };

    let mut iters = 0usize;
    // Warm sharp solves go straight to the polish: the previous solution is
    // already within its basin, and the scaling sweeps cannot improve it.
    if !(sharp && warm.is_some()) {
        let cost = cost_matrix(grid);
        let anneal_target = if sharp {
            (h * h / 8.0).max(eps_target)
        } else {
            eps_target
        };
        let mut rho = SpeciesState::new(&anchor.rho);
        let mut mu = SpeciesState::new(&anchor.mu);
        // psi in physical (cost) units: psi = 2 tau_eff * psi_hat.
        if let Some(d) = warm {
            for j in 0..n {
                rho.psi[j] = 2.0 * tau_eff * d.psi_hat_rho[j];
                mu.psi[j] = 2.0 * tau_eff * d.psi_hat_mu[j];
            }
        } else {
            for j in 0..n {
                let (fa, fb, ..) =
                    grad_in_log(oracle, p[j].max(floor).ln(), q[j].max(floor).ln());
                rho.psi[j] = -2.0 * tau_eff * fa;
                mu.psi[j] = -2.0 * tau_eff * fb;
            }
        }

        let mut scratch = vec![0.0; n];
        let schedule = eps_schedule(grid.length(), anneal_target, warm.is_some());
        let last_stage = schedule.len() - 1;
        let prox_pass = |rho: &mut SpeciesState,
                             mu: &mut SpeciesState,
                             p: &mut Vec<f64>,
                             q: &mut Vec<f64>,
                             scratch: &mut Vec<f64>,
                             eps: f64|
         -> Result<()> {
            rho.col_update(&cost, eps, scratch);
            mu.col_update(&cost, eps, scratch);
            let lam = eps / (2.0 * tau_eff);
            for j in 0..n {
                let (pj, qj, fa, fb) = prox_cell(
                    oracle,
                    lam,
                    rho.lxi[j] - ln_h,
                    mu.lxi[j] - ln_h,
                    p[j].max(1e-300).ln(),
                    q[j].max(1e-300).ln(),
                    cfg.prox_newton_tol,
                    j,
                )?;
                p[j] = pj;
                q[j] = qj;
                rho.psi[j] = -2.0 * tau_eff * fa;
                mu.psi[j] = -2.0 * tau_eff * fb;
            }
            Ok(())
        };
        for (stage, &eps) in schedule.iter().enumerate() {
            let stage_tol = if stage == last_stage && !sharp {
                cfg.scaling_tol
            } else {
                ANNEAL_STAGE_TOL
            };
            rho.have_phi = false;
            mu.have_phi = false;
            let mut hist_rho: Vec<Vec<f64>> = Vec::new();
            let mut hist_mu: Vec<Vec<f64>> = Vec::new();
            // (violation before extrapolating, saved duals to revert to)
            let mut pending: Option<(f64, Vec<f64>, Vec<f64>)> = None;
            loop {
                iters += 1;
                let v_rho = rho.row_update(&cost, eps, &mut scratch);
                let v_mu = mu.row_update(&cost, eps, &mut scratch);
                let viol = v_rho + v_mu;
                if std::env::var_os("JKO_TRACE").is_some() && iters % 50 == 0 {
                    eprintln!("iter {iters} stage {stage} eps {eps:.3e} viol {viol:.6e}");
                }
                if let Some((pre, saved_rho, saved_mu)) = pending.take() {
                    if !(viol <= 2.0 * pre) {
                        rho.psi = saved_rho;
                        mu.psi = saved_mu;
                        rho.have_phi = false;
                        mu.have_phi = false;
                        continue;
                    }
                }
                if viol <= stage_tol {
                    break;
                }
                if iters >= cfg.max_scaling_iter {
                    return Err(Error::ScalingNotConverged {
                        iters,
                        marginal_error: viol,
                        tol: cfg.scaling_tol,
                    });
                }
                prox_pass(&mut rho, &mut mu, &mut p, &mut q, &mut scratch, eps)?;
                hist_rho.push(rho.psi.clone());
                hist_mu.push(mu.psi.clone());
                if hist_rho.len() == 3 {
                    let mut cand_rho = vec![0.0; n];
                    let mut cand_mu = vec![0.0; n];
                    let moved =
                        aitken_extrapolate(&hist_rho[0], &hist_rho[1], &hist_rho[2], &mut cand_rho)
                            | aitken_extrapolate(&hist_mu[0], &hist_mu[1], &hist_mu[2], &mut cand_mu);
                    if moved {
                        pending = Some((viol, rho.psi.clone(), mu.psi.clone()));
                        rho.psi = cand_rho;
                        mu.psi = cand_mu;
                    }
                    hist_rho.clear();
                    hist_mu.clear();
                }
            }
        }
        // Resync the primal point with the converged duals so the densities
        // are the prox of the final plan state.
        let eps_final = *schedule.last().expect("schedule never empty");
        prox_pass(&mut rho, &mut mu, &mut p, &mut q, &mut scratch, eps_final)?;
    }

    let polish_iters = if sharp {
        newton_polish(oracle, cfg, anchor, tau_eff, &mut p, &mut q)?
    } else {
        0
    };

    // Duals in their step-size-free form, from the final primal point.
    let mut psi_hat_rho = vec![0.0; n];
    let mut psi_hat_mu = vec![0.0; n];
    for j in 0..n {
        let (fa, fb, ..) =
            grad_in_log(oracle, p[j].max(1e-300).ln(), q[j].max(1e-300).ln());
        psi_hat_rho[j] = -fa;
        psi_hat_mu[j] = -fb;
    }
    let duals = ScalingDuals {
        psi_hat_rho,
        psi_hat_mu,
        p: p.clone(),
        q: q.clone(),
    };
    Ok((p, q, duals, iters, polish_iters))
}

/// Mass-weighted spread of f_grad + phi/tau over occupied cells, normalized
/// by the spread of its constituents; see `StepResult`.
fn optimality_residual(
    grad: &[f64],
    potential_grad: &[f64],
    density: &Density,
    tau_eff: f64,
    floor: f64,
) -> f64 {
    let grid = density.grid();
    let n = grid.n_cells();
    let h = grid.h();
    let phi = potential_primitive(potential_grad, h);
    let vals = density.values();
    let mut wsum = 0.0;
    let mut mean = 0.0;
    let mut sel: Vec<(f64, f64, f64)> = Vec::new();
    for i in 0..n {
        if vals[i] > floor {
            let x = grad[i] + phi[i] / tau_eff;
            sel.push((vals[i], grad[i], phi[i] / tau_eff));
            wsum += vals[i];
            mean += vals[i] * x;
        }
    }
    if sel.is_empty() || wsum == 0.0 {
        return 0.0;
    }
    mean /= wsum;
    let mut var = 0.0;
    let (mut g_lo, mut g_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut k_lo, mut k_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(w, g, k) in &sel {
        let x = g + k;
        var += w * (x - mean) * (x - mean);
        g_lo = g_lo.min(g);
        g_hi = g_hi.max(g);
        k_lo = k_lo.min(k);
        k_hi = k_hi.max(k);
    }
    let spread = (g_hi - g_lo).max(k_hi - k_lo);
    if spread <= 0.0 {
        return 0.0;
    }
    (var / wsum).sqrt() / spread
}

fn build_step(
    oracle: &EnvelopeOracle,
    cfg: &JkoConfig,
    anchor: &DensityPair,
    tau_eff: f64,
    warm: Option<&ScalingDuals>,
) -> Result<(StepResult, ScalingDuals)> {
    let grid = anchor.grid();
    let (p, q, duals, scaling_iters, polish_iters) =
        scaling_solve(oracle, cfg, anchor, tau_eff, warm)?;
    let next = DensityPair::new(
        Density::from_unnormalized(grid, p)?,
        Density::from_unnormalized(grid, q)?,
    )?;
    let tr_rho = transport::quantile_w2(&next.rho, &anchor.rho)?;
    let tr_mu = transport::quantile_w2(&next.mu, &anchor.mu)?;
    let floor = cfg.mass_floor(grid);
    let n = grid.n_cells();
    let mut grad_rho = vec![0.0; n];
    let mut grad_mu = vec![0.0; n];
    {
        let pv = next.rho.values();
        let qv = next.mu.values();
        for i in 0..n {
            let (ga, gb) = oracle.f_grad(pv[i], qv[i])?;
            grad_rho[i] = ga;
            grad_mu[i] = gb;
        }
    }
    let optimality_residual_rho =
        optimality_residual(&grad_rho, &tr_rho.potential_grad, &next.rho, tau_eff, floor);
    let optimality_residual_mu =
        optimality_residual(&grad_mu, &tr_mu.potential_grad, &next.mu, tau_eff, floor);
    Ok((
        StepResult {
            next,
            w2sq_rho: tr_rho.w2sq,
            w2sq_mu: tr_mu.w2sq,
            potential_grad_rho: tr_rho.potential_grad,
            potential_grad_mu: tr_mu.potential_grad,
            optimality_residual_rho,
            optimality_residual_mu,
            scaling_iters,
            polish_iters,
        },
        duals,
    ))
}

/// One minimizing-movement step of size `cfg.tau` from `current`.
pub fn jko_step(
    oracle: &EnvelopeOracle,
    cfg: &JkoConfig,
    current: &DensityPair,
) -> Result<StepResult> {
    cfg.validate()?;
    Ok(build_step(oracle, cfg, current, cfg.tau, None)?.0)
}

/// The variational interpolant at penalty scale `s * cfg.tau`, s in (0, 1].
pub fn de_giorgi_step(
    oracle: &EnvelopeOracle,
    cfg: &JkoConfig,
    anchor: &DensityPair,
    s: f64,
) -> Result<StepResult> {
    cfg.validate()?;
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Domain(
            "variational-interpolation fraction must lie in (0, 1]",
        ));
    }
    Ok(build_step(oracle, cfg, anchor, s * cfg.tau, None)?.0)
}

fn record_step(
    oracle: &EnvelopeOracle,
    cfg: &JkoConfig,
    current: &DensityPair,
    warm: Option<&ScalingDuals>,
) -> Result<(StepRecord, ScalingDuals)> {
    let (result, duals) = build_step(oracle, cfg, current, cfg.tau, warm)?;
    // Walk the interpolation ladder from s = 1 downward, warm-starting each
    // solve from its upper neighbor; the s = 1 node reuses the main solve.
    let mut nodes: Vec<f64> = cfg.dg_nodes.clone();
    nodes.sort_by(|a, b| b.partial_cmp(a).expect("validated finite nodes"));
    nodes.dedup();
    let mut ladder: Vec<DeGiorgiSample> = Vec::with_capacity(nodes.len());
    let mut ladder_warm = duals.clone();
    for &s in &nodes {
        if s == 1.0 {
            ladder.push(DeGiorgiSample {
                s,
                pair: result.next.clone(),
                w2sq_rho: result.w2sq_rho,
                w2sq_mu: result.w2sq_mu,
            });
        } else {
            let (r, d) = build_step(oracle, cfg, current, s * cfg.tau, Some(&ladder_warm))?;
            ladder.push(DeGiorgiSample {
                s,
                pair: r.next,
                w2sq_rho: r.w2sq_rho,
                w2sq_mu: r.w2sq_mu,
            });
            ladder_warm = d;
        }
    }
    // Store samples in the order the config lists its nodes.
    let mut de_giorgi: Vec<DeGiorgiSample> = Vec::with_capacity(cfg.dg_nodes.len());
    for &s in &cfg.dg_nodes {
        let found = ladder
            .iter()
            .find(|smp| smp.s == s)
            .expect("every configured node was solved");
        de_giorgi.push(found.clone());
    }
    let velocity_rho: Vec<f64> = result
        .potential_grad_rho
        .iter()
        .map(|&g| -g / cfg.tau)
        .collect();
    let velocity_mu: Vec<f64> = result
        .potential_grad_mu
        .iter()
        .map(|&g| -g / cfg.tau)
        .collect();
    Ok((
        StepRecord {
            result,
            de_giorgi,
            velocity_rho,
            velocity_mu,
        },
        duals,
    ))
}

/// Runs `n_steps` minimizing-movement steps with variational-interpolation
/// sampling at `cfg.dg_nodes`.  A failing step aborts with the partial
/// trajectory attached.
pub fn run_trajectory(
    oracle: &EnvelopeOracle,
    cfg: &JkoConfig,
    initial: &DensityPair,
    n_steps: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut steps: Vec<StepRecord> = Vec::with_capacity(n_steps);
    let mut current = initial.clone();
    let mut warm: Option<ScalingDuals> = None;
    for k in 0..n_steps {
        match record_step(oracle, cfg, &current, warm.as_ref()) {
            Ok((record, duals)) => {
                current = record.result.next.clone();
                warm = Some(duals);
                steps.push(record);
            }
            Err(source) => {
                return Err(Error::TrajectoryAborted {
                    step: k,
                    partial: Box::new(Trajectory {
                        initial: initial.clone(),
                        tau: cfg.tau,
                        steps,
                    }),
                    source: Box::new(source),
                });
            }
        }
    }
    Ok(Trajectory {
        initial: initial.clone(),
        tau: cfg.tau,
        steps,
    })
}

/// Evaluates the trajectory at time `t` under the chosen convention.
pub fn interpolate(traj: &Trajectory, t: f64, kind: InterpKind) -> Result<Interpolant> {
    let t_max = traj.t_max();
    let fuzz = 1e-12 * traj.tau;
    if !(t >= -fuzz && t <= t_max + fuzz) {
        return Err(Error::TimeOutOfRange { t, t_max });
    }
    let n = traj.n_steps();
    let theta_of = |t: f64, k: usize| (t - k as f64 * traj.tau) / traj.tau;
    match kind {
        InterpKind::Constant => {
            // Value of iterate k+1 on the left-open interval (k tau, (k+1) tau].
            let k = ((t / traj.tau - 1e-12).ceil().max(0.0) as usize).min(n);
            Ok(Interpolant {
                pair: traj.pair_at(k).clone(),
                exact_node: true,
            })
        }
        InterpKind::Geodesic => {
            let k = ((t / traj.tau + 1e-12).floor().max(0.0) as usize).min(n.saturating_sub(1));
            if n == 0 {
                return Ok(Interpolant {
                    pair: traj.initial.clone(),
                    exact_node: true,
                });
            }
            let theta = theta_of(t, k).clamp(0.0, 1.0);
            let a = traj.pair_at(k);
            let b = traj.pair_at(k + 1);
            let rho = transport::displacement_interpolate(&a.rho, &b.rho, theta)?;
            let mu = transport::displacement_interpolate(&a.mu, &b.mu, theta)?;
            Ok(Interpolant {
                pair: DensityPair::new(rho, mu)?,
                exact_node: true,
            })
        }
        InterpKind::DeGiorgi => {
            if n == 0 {
                return Ok(Interpolant {
                    pair: traj.initial.clone(),
                    exact_node: true,
                });
            }
            let k = ((t / traj.tau + 1e-12).floor().max(0.0) as usize).min(n - 1);
            let theta = theta_of(t, k);
            if theta <= 1e-12 {
                return Ok(Interpolant {
                    pair: traj.pair_at(k).clone(),
                    exact_node: true,
                });
            }
            let record = &traj.steps[k];
            if record.de_giorgi.is_empty() {
                return Err(Error::MissingDeGiorgiSamples);
            }
            let mut best = &record.de_giorgi[0];
            for sample in &record.de_giorgi[1..] {
                if (sample.s - theta).abs() < (best.s - theta).abs() {
                    best = sample;
                }
            }
            Ok(Interpolant {
                pair: best.pair.clone(),
                exact_node: (best.s - theta).abs() <= 1e-12,
            })
        }
    }
}

/// Entropic squared transport cost between two fixed densities (plain
/// log-domain Sinkhorn with annealing); `eps_scale` is the kernel scale in
/// squared length units.
pub fn entropic_w2sq(source: &Density, target: &Density, eps_scale: f64) -> Result<f64> {
    if source.grid().n_cells() != target.grid().n_cells() {
        return Err(Error::GridMismatch {
            left: source.grid().n_cells(),
            right: target.grid().n_cells(),
        });
    }
    if !(eps_scale > 0.0 && eps_scale.is_finite()) {
        return Err(Error::Domain("entropic scale must be positive"));
    }
    let grid = source.grid();
    let n = grid.n_cells();
    let cost = cost_matrix(grid);
    let mut src = SpeciesState::new(source);
    let tgt_mass: Vec<f64> = target.values().iter().map(|&v| v * grid.h()).collect();
    let ln_tgt: Vec<f64> = tgt_mass
        .iter()
        .map(|&m| if m > 0.0 { m.ln() } else { f64::NEG_INFINITY })
        .collect();
    let mut scratch = vec![0.0; n];
    let tol = 1e-10;
    let max_iter = 50_000;
    let mut iters = 0usize;
    let schedule = eps_schedule(grid.length(), eps_scale, false);
    let last_stage = schedule.len() - 1;
    for (stage, &eps) in schedule.iter().enumerate() {
        let stage_tol = if stage == last_stage { tol } else { ANNEAL_STAGE_TOL };
        src.have_phi = false;
        loop {
            iters += 1;
            let viol = src.row_update(&cost, eps, &mut scratch);
            if viol <= stage_tol {
                break;
            }
            if iters >= max_iter {
                return Err(Error::ScalingNotConverged {
                    iters,
                    marginal_error: viol,
                    tol,
                });
            }
            // Exact column projection onto the target marginal.
            for j in 0..n {
                if ln_tgt[j] == f64::NEG_INFINITY {
                    src.psi[j] = f64::NEG_INFINITY;
                    continue;
                }
                let row = &cost[j * n..(j + 1) * n];
                for i in 0..n {
                    scratch[i] = (src.phi[i] - row[i]) / eps;
                }
                src.psi[j] = eps * (ln_tgt[j] - logsumexp(&scratch));
            }
        }
    }
    let eps = eps_scale;
    let mut row_costs = vec![0.0; n];
    let mut row_masses = vec![0.0; n];
    for i in 0..n {
        if src.phi[i] == f64::NEG_INFINITY {
            continue;
        }
        let row = &cost[i * n..(i + 1) * n];
        let mut cost_acc = 0.0;
        let mut mass_acc = 0.0;
        for j in 0..n {
            if src.psi[j] == f64::NEG_INFINITY {
                continue;
            }
            let g = ((src.phi[i] + src.psi[j] - row[j]) / eps).exp();
            cost_acc += g * row[j];
            mass_acc += g;
        }
        row_costs[i] = cost_acc;
        row_masses[i] = mass_acc;
    }
    let total_cost = pairwise_sum(&row_costs);
    let total_mass = pairwise_sum(&row_masses);
    if !(total_mass > 0.0) {
        return Err(Error::Domain("entropic plan has no mass"));
    }
    Ok(total_cost / total_mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use std::sync::OnceLock;

    fn shared_oracle() -> &'static EnvelopeOracle {
        static ORACLE: OnceLock<EnvelopeOracle> = OnceLock::new();
        ORACLE.get_or_init(EnvelopeOracle::new)
    }

    fn energy(oracle: &EnvelopeOracle, pair: &DensityPair) -> f64 {
        let h = pair.grid().h();
        let terms: Vec<f64> = pair
            .rho
            .values()
            .iter()
            .zip(pair.mu.values())
            .map(|(&a, &b)| oracle.f_value(a, b).unwrap())
            .collect();
        h * pairwise_sum(&terms)
    }

    fn quick_config(tau: f64, eps: f64) -> JkoConfig {
        let mut cfg = JkoConfig::new(tau, eps).unwrap();
        cfg.dg_nodes = vec![0.5, 1.0];
        cfg
    }

    #[test]
    fn uniform_pair_is_a_fixed_point() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(32, 1.0).unwrap();
        let pair = presets::uniform_pair(grid).unwrap();
        let cfg = JkoConfig::new(1e-3, 1e-4).unwrap();
        let step = jko_step(oracle, &cfg, &pair).unwrap();
        for (&v, &u) in step
            .next
            .rho
            .values()
            .iter()
            .zip(pair.rho.values().iter())
        {
            assert!((v - u).abs() <= 1e-8, "rho moved: {v} vs {u}");
        }
        for (&v, &u) in step.next.mu.values().iter().zip(pair.mu.values().iter()) {
            assert!((v - u).abs() <= 1e-8);
        }
        assert!(step.w2sq_rho <= 1e-12);
        assert!(step.w2sq_mu <= 1e-12);
    }

    #[test]
    fn energy_decreases_with_entropic_slack() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(48, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let cfg = JkoConfig::new(1e-3, 1e-4).unwrap();
        let slack = 10.0 * cfg.eps_reg * grid.length();
        let mut current = pair;
        for _ in 0..3 {
            let step = jko_step(oracle, &cfg, &current).unwrap();
            let lhs = energy(oracle, &step.next)
                + (step.w2sq_rho + step.w2sq_mu) / (2.0 * cfg.tau);
            let rhs = energy(oracle, &current) + slack;
            assert!(lhs <= rhs, "minimizing movement increased energy: {lhs} > {rhs}");
            current = step.next;
        }
    }

    #[test]
    fn de_giorgi_at_s_one_matches_the_full_step() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(32, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let cfg = JkoConfig::new(1e-3, 1e-4).unwrap();
        let full = jko_step(oracle, &cfg, &pair).unwrap();
        let dg = de_giorgi_step(oracle, &cfg, &pair, 1.0).unwrap();
        for (a, b) in full
            .next
            .rho
            .values()
            .iter()
            .zip(dg.next.rho.values().iter())
        {
            assert!((a - b).abs() <= 1e-8);
        }
        assert!((full.w2sq_rho - dg.w2sq_rho).abs() <= 1e-12);
    }

    #[test]
    fn interpolation_distance_grows_with_the_fraction() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(32, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let cfg = JkoConfig::new(2e-3, 1e-4).unwrap();
        let mut last = -1.0;
        for &s in &[0.25, 0.5, 0.75, 1.0] {
            let dg = de_giorgi_step(oracle, &cfg, &pair, s).unwrap();
            let d = dg.w2sq_rho + dg.w2sq_mu;
            assert!(
                d >= last - 1e-10 * (1.0 + d),
                "interpolation distance decreased at s={s}: {d} < {last}"
            );
            last = d;
        }
    }

    #[test]
    fn trajectory_preserves_mass_and_positivity() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(32, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let cfg = quick_config(1e-3, 1e-4);
        let traj = run_trajectory(oracle, &cfg, &pair, 3).unwrap();
        assert_eq!(traj.n_steps(), 3);
        for k in 0..=3 {
            let p = traj.pair_at(k);
            assert!((p.rho.mass() - 1.0).abs() <= 1e-9);
            assert!((p.mu.mass() - 1.0).abs() <= 1e-9);
            assert!(p.rho.values().iter().all(|&v| v >= 0.0));
            assert!(p.mu.values().iter().all(|&v| v >= 0.0));
        }
        for rec in &traj.steps {
            assert_eq!(rec.de_giorgi.len(), cfg.dg_nodes.len());
            assert_eq!(rec.de_giorgi[0].s, 0.5);
            assert_eq!(rec.de_giorgi[1].s, 1.0);
        }
    }

    #[test]
    fn velocities_satisfy_the_kinetic_identity() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(48, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let cfg = quick_config(1e-3, 1e-4);
        let traj = run_trajectory(oracle, &cfg, &pair, 2).unwrap();
        let h = grid.h();
        for rec in &traj.steps {
            let kin: Vec<f64> = rec
                .result
                .next
                .rho
                .values()
                .iter()
                .zip(rec.velocity_rho.iter())
                .map(|(&r, &v)| r * v * v)
                .collect();
            let lhs = h * pairwise_sum(&kin);
            let rhs = rec.result.w2sq_rho / (cfg.tau * cfg.tau);
            assert!(
                (lhs - rhs).abs() <= 1e-8 * rhs.max(1e-30),
                "kinetic identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn optimality_residual_is_small_on_a_smooth_step() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(64, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let cfg = JkoConfig::new(1e-3, 1e-4).unwrap();
        let step = jko_step(oracle, &cfg, &pair).unwrap();
        assert!(step.optimality_residual_rho.is_finite());
        assert!(
            step.optimality_residual_rho <= 0.05,
            "rho residual too large: {}",
            step.optimality_residual_rho
        );
        assert!(
            step.optimality_residual_mu <= 0.05,
            "mu residual too large: {}",
            step.optimality_residual_mu
        );
    }

    #[test]
    fn interpolation_conventions() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(32, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let cfg = quick_config(1e-3, 1e-4);
        let traj = run_trajectory(oracle, &cfg, &pair, 2).unwrap();
        let tau = cfg.tau;

        let at0 = interpolate(&traj, 0.0, InterpKind::Constant).unwrap();
        assert_eq!(at0.pair.rho.values(), traj.initial.rho.values());
        let mid = interpolate(&traj, 0.5 * tau, InterpKind::Constant).unwrap();
        assert_eq!(mid.pair.rho.values(), traj.pair_at(1).rho.values());
        let at_node = interpolate(&traj, tau, InterpKind::Constant).unwrap();
        assert_eq!(at_node.pair.rho.values(), traj.pair_at(1).rho.values());

        for k in 0..=2usize {
            let geo = interpolate(&traj, k as f64 * tau, InterpKind::Geodesic).unwrap();
            for (a, b) in geo
                .pair
                .rho
                .values()
                .iter()
                .zip(traj.pair_at(k).rho.values().iter())
            {
                assert!((a - b).abs() <= 1e-12);
            }
        }

        let dg = interpolate(&traj, 1.5 * tau, InterpKind::DeGiorgi).unwrap();
        assert!(dg.exact_node, "0.5 is a stored node");
        let dg_off = interpolate(&traj, 1.3 * tau, InterpKind::DeGiorgi).unwrap();
        assert!(!dg_off.exact_node, "0.3 is not a stored node");

        assert!(matches!(
            interpolate(&traj, -0.5 * tau, InterpKind::Constant),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            interpolate(&traj, 2.5 * tau, InterpKind::Constant),
            Err(Error::TimeOutOfRange { .. })
        ));

        let mut bare = traj.clone();
        for rec in &mut bare.steps {
            rec.de_giorgi.clear();
        }
        assert!(matches!(
            interpolate(&bare, 0.4 * tau, InterpKind::DeGiorgi),
            Err(Error::MissingDeGiorgiSamples)
        ));
    }

    #[test]
    fn entropic_cost_matches_quantile_cost() {
        let grid = Grid1D::new(64, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let exact = transport::quantile_w2(&pair.rho, &pair.mu).unwrap().w2sq;
        let entropic = entropic_w2sq(&pair.rho, &pair.mu, 1e-4).unwrap();
        let rel = (entropic - exact).abs() / exact;
        assert!(
            rel <= 0.02,
            "entropic vs quantile disagreement {rel} (exact {exact}, entropic {entropic})"
        );
    }

    #[test]
    fn exhausted_iteration_budget_aborts_with_partial_trajectory() {
        let oracle = shared_oracle();
        let grid = Grid1D::new(32, 1.0).unwrap();
        let pair = presets::two_bumps(grid).unwrap();
        let mut cfg = quick_config(1e-3, 1e-4);
        cfg.max_scaling_iter = 3;
        let err = run_trajectory(oracle, &cfg, &pair, 2).unwrap_err();
        match err {
            Error::TrajectoryAborted { step, partial, source } => {
                assert_eq!(step, 0);
                assert_eq!(partial.n_steps(), 0);
                assert!(matches!(*source, Error::ScalingNotConverged { .. }));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_parameters() {
        assert!(JkoConfig::new(0.0, 1e-4).is_err());
        assert!(JkoConfig::new(1e-3, 0.0).is_err());
        let mut cfg = JkoConfig::new(1e-3, 1e-4).unwrap();
        cfg.dg_nodes = vec![0.0];
        assert!(cfg.validate().is_err());
        cfg.dg_nodes = vec![1.5];
        assert!(cfg.validate().is_err());
    }
}
