//! Energies, the metric slope, and the energy-dissipation ledger.
//!
//! This module evaluates the functionals that turn a minimizing-movement
//! trajectory into checkable inequalities:
//!
//! * `energy_f` — the enveloped energy `F = h·Σ f(ρ_i, μ_i)`;
//! * `energy_g` — the auxiliary entropy `G = h·Σ [ρ ln ρ + μ ln μ]`;
//! * `slope_f` — the metric slope of `F`, split into its two regional
//!   contributions;
//! * `edi_report` — the per-step and cumulative dissipation ledger
//!   `F(start) ≥ F(end) + ½∫kinetic + ½∫slope` with the flow-interchange
//!   entropy bound attached to every step;
//! * `chain_rule_check` — the discrete residue of the identity
//!   `d/dt ∫ g(ρ, μ) = ∫ ρ v·∇g_a + μ w·∇g_b` along a trajectory.
//!
//! Discrete gradients are forward differences: the interface between cells
//! `i` and `i+1` belongs to cell `i`, and the domain boundary carries no
//! flux, so the last cell's gradient is zero. All accumulations go through
//! pairwise summation so reports are bit-stable.

use serde::{Deserialize, Serialize};

use crate::envelope::{f0, EnvelopeOracle, Region};
use crate::grid::{DensityPair, Grid1D};
use crate::jko::Trajectory;
use crate::numerics::{pairwise_sum, xlogx};
use crate::{Error, Result};

/// Support threshold below which a cell is treated as vacuum in
/// mass-weighted statistics: 1e-9 of total mass concentrated in one cell.
/// Matches [`crate::jko::JkoConfig::mass_floor`].
fn support_floor(grid: Grid1D) -> f64 {
    1e-9 / grid.h()
}

/// Forward-difference gradient. Entry `i` holds `(v[i+1] - v[i]) / h` — the
/// difference across the interface owned by cell `i` — and the last entry is
/// zero because the right domain boundary is a no-flux wall.
pub fn forward_diff(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut g = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        g[i] = (values[i + 1] - values[i]) / h;
    }
    g
}

/// Which reading of the slope integrand to use on the open region B.
///
/// The B-region integrand is `ρ|∇f_a|² + μ|∇f_b|²` with
/// `f_a = ln a + b + 1`, whose spatial gradient expands to
/// `∇ρ/ρ + ∇μ` (and symmetrically for `f_b`). `Expanded` implements that
/// expansion and is the default everywhere. `Literal` replaces the gradient
/// of the partner density by its value (`∇ρ/ρ + μ`), a reading kept solely
/// so the two can be compared; it is not used by any ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeConvention {
    Expanded,
    Literal,
}

/// The slope of `F` at a pair, split by region.
///
/// `b_region_part` collects `h·[ρ|∇ρ/ρ + ∇μ|² + μ|∇μ/μ + ∇ρ|²]` over cells
/// classified in the open region B (terms whose density factor is below the
/// support floor are dropped — the integrand is mass-weighted, so vacuum
/// contributes nothing). `a_region_part` collects
/// `h·(f̃″(S))²·|∇S|²·S` over cells in the closed region A, where `f̃` is the
/// diagonal profile of the envelope and `S = ρ + μ`. Classification is
/// cellwise; no blending happens at region interfaces.
#[derive(Debug, Clone)]
pub struct SlopeBreakdown {
    pub b_region_part: f64,
    pub a_region_part: f64,
    pub cell_classification: Vec<Region>,
}

impl SlopeBreakdown {
    /// Total slope: the sum of both regional parts.
    pub fn total(&self) -> f64 {
        self.b_region_part + self.a_region_part
    }
}

/// Enveloped energy `h·Σ f(ρ_i, μ_i)` with the `0·ln 0 = 0` convention.
pub fn energy_f(pair: &DensityPair, oracle: &EnvelopeOracle) -> Result<f64> {
    let h = pair.grid().h();
    let rho = pair.rho.values();
    let mu = pair.mu.values();
    let mut terms = Vec::with_capacity(rho.len());
    for (&a, &b) in rho.iter().zip(mu) {
        terms.push(oracle.f_value(a, b)?);
    }
    Ok(h * pairwise_sum(&terms))
}

/// Auxiliary entropy `h·Σ [ρ ln ρ + μ ln μ]` with the `0·ln 0 = 0`
/// convention. Bounded below by `-2·L/e` on any pair of nonnegative
/// densities over a domain of length `L`.
pub fn energy_g(pair: &DensityPair) -> f64 {
    let h = pair.grid().h();
    let terms: Vec<f64> = pair
        .rho
        .values()
        .iter()
        .zip(pair.mu.values())
        .map(|(&a, &b)| xlogx(a) + xlogx(b))
        .collect();
    h * pairwise_sum(&terms)
}

/// Metric slope of `F` with the default [`SlopeConvention::Expanded`]
/// integrand.
pub fn slope_f(pair: &DensityPair, oracle: &EnvelopeOracle) -> Result<SlopeBreakdown> {
    slope_f_with(pair, oracle, SlopeConvention::Expanded)
}

/// Metric slope of `F` under an explicit integrand convention.
pub fn slope_f_with(
    pair: &DensityPair,
    oracle: &EnvelopeOracle,
    convention: SlopeConvention,
) -> Result<SlopeBreakdown> {
    let grid = pair.grid();
    let h = grid.h();
    let floor = support_floor(grid);
    let rho = pair.rho.values();
    let mu = pair.mu.values();
    let s = pair.s_sum();
    let grho = forward_diff(rho, h);
    let gmu = forward_diff(mu, h);
    let gs = forward_diff(&s, h);
    let n = rho.len();
    let mut b_terms = Vec::with_capacity(n);
    let mut a_terms = Vec::with_capacity(n);
    let mut cell_classification = Vec::with_capacity(n);
    for i in 0..n {
        let region = oracle.classify(rho[i], mu[i]);
        cell_classification.push(region);
        match region {
            Region::B => {
                let (partner_rho, partner_mu) = match convention {
                    SlopeConvention::Expanded => (gmu[i], grho[i]),
                    SlopeConvention::Literal => (mu[i], rho[i]),
                };
                let mut t = 0.0;
                if rho[i] > floor {
                    let d = grho[i] / rho[i] + partner_rho;
                    t += rho[i] * d * d;
                }
                if mu[i] > floor {
                    let d = gmu[i] / mu[i] + partner_mu;
                    t += mu[i] * d * d;
                }
                b_terms.push(h * t);
            }
            Region::A => {
                let f2 = oracle.tilde_f_second(s[i])?;
                a_terms.push(h * f2 * f2 * gs[i] * gs[i] * s[i]);
            }
        }
    }
    Ok(SlopeBreakdown {
        b_region_part: pairwise_sum(&b_terms),
        a_region_part: pairwise_sum(&a_terms),
        cell_classification,
    })
}

/// Quadrature weights for nodes in `(0, 1]` built from midpoint cells: node
/// `j` carries the length of the interval between the midpoints toward its
/// neighbors (extended to 0 on the left end and to 1 on the right end).
///
/// Weights are nonnegative and sum to one, so constants integrate exactly;
/// when the nodes are the midpoints of a uniform partition this is exactly
/// the composite midpoint rule.
pub fn midpoint_weights(nodes: &[f64]) -> Result<Vec<f64>> {
    if nodes.is_empty() {
        return Err(Error::Domain("quadrature needs at least one node"));
    }
    if nodes.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::Domain("quadrature nodes must lie in (0, 1]"));
    }
    if nodes.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("quadrature nodes must be ascending"));
    }
    let m = nodes.len();
    let mut weights = vec![0.0; m];
    let mut left = 0.0;
    for j in 0..m {
        let right = if j + 1 < m {
            0.5 * (nodes[j] + nodes[j + 1])
        } else {
            1.0
        };
        weights[j] = right - left;
        left = right;
    }
    Ok(weights)
}

/// Per-step entry of the dissipation ledger for the step from iterate `k`
/// to iterate `k+1`.
///
/// `slope_quad` is the midpoint-cell quadrature of the slope over the step's
/// interpolation samples; `flow_interchange_lhs` is the entropy drop
/// `G(k) − G(k+1)` and `flow_interchange_rhs` its theoretical lower bound
/// `r₀·τ·h·Σ |∇S|²/S` evaluated at the new iterate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLedger {
    pub k: usize,
    pub f_before: f64,
    pub f_after: f64,
    pub w2sq_rho: f64,
    pub w2sq_mu: f64,
    pub slope_quad: f64,
    pub flow_interchange_lhs: f64,
    pub flow_interchange_rhs: f64,
}

/// Cumulative dissipation ledger of a trajectory.
///
/// `kinetic_rho` and `kinetic_mu` are the time-integrated squared transport
/// speeds `Σ_k τ·(w2sq/τ²)` (the per-step geodesic has constant speed, so
/// the step integral is exact); `slope_integral` is `Σ_k τ·slope_quad`; and
/// `residual = f_initial − [f_final + ½kinetic_rho + ½kinetic_mu +
/// ½slope_integral]` — nonnegative up to solver slack when the dissipation
/// inequality holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdiLedger {
    pub f_initial: f64,
    pub f_final: f64,
    pub kinetic_rho: f64,
    pub kinetic_mu: f64,
    pub slope_integral: f64,
    pub residual: f64,
    pub per_step: Vec<StepLedger>,
}

/// Builds the dissipation ledger of a trajectory.
///
/// Every step must carry interpolation samples (the slope quadrature is
/// taken over them); a trajectory recorded with an empty node list is
/// rejected with [`Error::MissingDeGiorgiSamples`].
pub fn edi_report(traj: &Trajectory, oracle: &EnvelopeOracle) -> Result<EdiLedger> {
    let tau = traj.tau;
    let h = traj.initial.grid().h();
    let r0 = oracle.r0();
    let f_initial = energy_f(&traj.initial, oracle)?;
    let mut f_before = f_initial;
    let mut per_step = Vec::with_capacity(traj.n_steps());
    let mut kinetic_rho_terms = Vec::with_capacity(traj.n_steps());
    let mut kinetic_mu_terms = Vec::with_capacity(traj.n_steps());
    let mut slope_terms = Vec::with_capacity(traj.n_steps());
    for (k, rec) in traj.steps.iter().enumerate() {
        if rec.de_giorgi.is_empty() {
            return Err(Error::MissingDeGiorgiSamples);
        }
        let prev = traj.pair_at(k);
        let next = &rec.result.next;
        let f_after = energy_f(next, oracle)?;

        // Slope quadrature over the interpolation ladder, sorted by node.
        let mut samples: Vec<_> = rec.de_giorgi.iter().collect();
        samples.sort_by(|x, y| x.s.total_cmp(&y.s));
        let nodes: Vec<f64> = samples.iter().map(|d| d.s).collect();
        let weights = midpoint_weights(&nodes)?;
        let mut quad_terms = Vec::with_capacity(samples.len());
        for (sample, &weight) in samples.iter().zip(&weights) {
            quad_terms.push(weight * slope_f(&sample.pair, oracle)?.total());
        }
        let slope_quad = pairwise_sum(&quad_terms);

        // Entropy drop across the step against its dissipation lower bound.
        let s_next = next.s_sum();
        let gs = forward_diff(&s_next, h);
        let fi_terms: Vec<f64> = (0..s_next.len())
            .map(|i| {
                if s_next[i] > 0.0 {
                    gs[i] * gs[i] / s_next[i]
                } else {
                    0.0
                }
            })
            .collect();
        let flow_interchange_rhs = r0 * tau * h * pairwise_sum(&fi_terms);
        let flow_interchange_lhs = energy_g(prev) - energy_g(next);

        per_step.push(StepLedger {
            k,
            f_before,
            f_after,
            w2sq_rho: rec.result.w2sq_rho,
            w2sq_mu: rec.result.w2sq_mu,
            slope_quad,
            flow_interchange_lhs,
            flow_interchange_rhs,
        });
        kinetic_rho_terms.push(rec.result.w2sq_rho / tau);
        kinetic_mu_terms.push(rec.result.w2sq_mu / tau);
        slope_terms.push(tau * slope_quad);
        f_before = f_after;
    }
    let f_final = f_before;
    let kinetic_rho = pairwise_sum(&kinetic_rho_terms);
    let kinetic_mu = pairwise_sum(&kinetic_mu_terms);
    let slope_integral = pairwise_sum(&slope_terms);
    let residual =
        f_initial - (f_final + 0.5 * kinetic_rho + 0.5 * kinetic_mu + 0.5 * slope_integral);
    Ok(EdiLedger {
        f_initial,
        f_final,
        kinetic_rho,
        kinetic_mu,
        slope_integral,
        residual,
        per_step,
    })
}

/// Test function for the chain-rule residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GChoice {
    /// `g(a, b) = f̃(a + b)`, with the diagonal profile extended linearly
    /// below its native threshold `a + b = 2` (value `f̃(2) + f̃′(2)·(s−2)`,
    /// curvature zero) so that `g` is C¹ with bounded nonnegative curvature
    /// on the whole quadrant.
    TildeFOfSum,
    /// `g = f`, the envelope itself; second derivatives are taken regionwise
    /// (the raw-density Hessian on B, the diagonal-profile curvature on A).
    FFull,
}

/// Discrete residue of the transport chain rule along a trajectory:
///
/// `|∫g(end) − ∫g(start) − Σ_k τ·h·Σ_i [ρ v·(g_aa ∇ρ + g_ab ∇μ) +
/// μ w·(g_ab ∇ρ + g_bb ∇μ)]|`,
///
/// with densities, gradients, and velocities of step `k` all evaluated at
/// the step's new iterate (the piecewise-constant reading of the
/// trajectory). Mass-weighted B-region terms are assembled in their
/// division-free form (`ρ·g_aa·∇ρ = ∇ρ`, …), so vacuum cells contribute
/// zero; first-order small in the grid spacing on smooth flows.
pub fn chain_rule_check(
    traj: &Trajectory,
    g_choice: GChoice,
    oracle: &EnvelopeOracle,
) -> Result<f64> {
    let tau = traj.tau;
    let grid = traj.initial.grid();
    let h = grid.h();
    let floor = support_floor(grid);
    // Linear extension anchors for the diagonal profile below s = 2.
    let profile_at_two = oracle.tilde_f(2.0)?;
    let slope_at_two = oracle.tilde_f_prime(2.0)?;
    let g_value = |a: f64, b: f64| -> Result<f64> {
        match g_choice {
            GChoice::TildeFOfSum => {
                let s = a + b;
                if s >= 2.0 {
                    oracle.tilde_f(s)
                } else {
                    Ok(profile_at_two + slope_at_two * (s - 2.0))
                }
            }
            GChoice::FFull => oracle.f_value(a, b),
        }
    };
    let boundary = |pair: &DensityPair| -> Result<f64> {
        let mut terms = Vec::with_capacity(pair.rho.values().len());
        for (&a, &b) in pair.rho.values().iter().zip(pair.mu.values()) {
            terms.push(g_value(a, b)?);
        }
        Ok(h * pairwise_sum(&terms))
    };

    let mut step_terms = Vec::with_capacity(traj.n_steps());
    for rec in &traj.steps {
        let pair = &rec.result.next;
        let rho = pair.rho.values();
        let mu = pair.mu.values();
        let s = pair.s_sum();
        let grho = forward_diff(rho, h);
        let gmu = forward_diff(mu, h);
        let gs = forward_diff(&s, h);
        let v = &rec.velocity_rho;
        let w = &rec.velocity_mu;
        let mut cell_terms = Vec::with_capacity(rho.len());
        for i in 0..rho.len() {
            let term = match g_choice {
                GChoice::TildeFOfSum => {
                    let f2 = if s[i] >= 2.0 {
                        oracle.tilde_f_second(s[i])?
                    } else {
                        0.0
                    };
                    (rho[i] * v[i] + mu[i] * w[i]) * f2 * gs[i]
                }
                GChoice::FFull => match oracle.classify(rho[i], mu[i]) {
                    Region::A => {
                        let f2 = oracle.tilde_f_second(s[i])?;
                        (rho[i] * v[i] + mu[i] * w[i]) * f2 * gs[i]
                    }
                    Region::B => {
                        // g_aa = 1/a, g_ab = 1, g_bb = 1/b, so the
                        // mass-weighted rows collapse to division-free
                        // combinations; sub-floor cells carry no mass.
                        let mut t = 0.0;
                        if rho[i] > floor {
                            t += v[i] * (grho[i] + rho[i] * gmu[i]);
                        }
                        if mu[i] > floor {
                            t += w[i] * (mu[i] * grho[i] + gmu[i]);
                        }
                        t
                    }
                },
            };
            cell_terms.push(term);
        }
        step_terms.push(tau * h * pairwise_sum(&cell_terms));
    }
    let lhs = boundary(traj.final_pair())? - boundary(&traj.initial)?;
    Ok((lhs - pairwise_sum(&step_terms)).abs())
}

/// Pointwise quadratic form of the entropy-dissipation estimate at a point
/// of the open region B with strictly positive densities:
///
/// `|ga|²·(1/a − r₀/S) + |gb|²·(1/b − r₀/S) + 2·ga·gb·(1 − r₀/S)`,
///
/// where `S = a + b`. Nonnegative for every gradient pair `(ga, gb)`
/// whenever `r₀` is the dissipation constant of the envelope — this is the
/// matrix-positivity fact that turns entropy decrease along a step into the
/// `r₀·τ·∫|∇S|²/S` lower bound.
pub fn dissipation_form(a: f64, b: f64, ga: f64, gb: f64, r0: f64) -> f64 {
    let s = a + b;
    ga * ga * (1.0 / a - r0 / s) + gb * gb * (1.0 / b - r0 / s) + 2.0 * ga * gb * (1.0 - r0 / s)
}

/// Per-cell `(lhs, rhs)` of the composite-gradient slope bound
/// `|∇(S + P)|²/S ≤ ρ|∇f_a|² + μ|∇f_b|²`, where `P = ρμ` on B and
/// `P = π(S)` (the well product) on A.
///
/// The composite gradient is assembled in product-rule-expanded form —
/// `∇(S+P) = ∇ρ·(1+μ) + ∇μ·(1+ρ)` on B and `(1 + π′(S))·∇S` on A — so the
/// bound is pointwise algebra in the cell values and holds to machine
/// precision cell by cell; on A it is an identity (up to the accuracy of the
/// well solve). B-cells with a species at or below the support floor are
/// reported as `(0, 0)`: the bound constrains only strictly positive
/// densities.
pub fn gradient_bound_terms(
    pair: &DensityPair,
    oracle: &EnvelopeOracle,
) -> Result<Vec<(f64, f64)>> {
    let grid = pair.grid();
    let h = grid.h();
    let floor = support_floor(grid);
    let rho = pair.rho.values();
    let mu = pair.mu.values();
    let s = pair.s_sum();
    let grho = forward_diff(rho, h);
    let gmu = forward_diff(mu, h);
    let gs = forward_diff(&s, h);
    let mut out = Vec::with_capacity(rho.len());
    for i in 0..rho.len() {
        let entry = match oracle.classify(rho[i], mu[i]) {
            Region::B => {
                if rho[i] <= floor || mu[i] <= floor {
                    (0.0, 0.0)
                } else {
                    let composite = grho[i] * (1.0 + mu[i]) + gmu[i] * (1.0 + rho[i]);
                    let lhs = composite * composite / s[i];
                    let da = grho[i] / rho[i] + gmu[i];
                    let db = gmu[i] / mu[i] + grho[i];
                    (lhs, rho[i] * da * da + mu[i] * db * db)
                }
            }
            Region::A => {
                let one_plus = 1.0 + oracle.pi_prime(s[i])?;
                let lhs = one_plus * one_plus * gs[i] * gs[i] / s[i];
                let f2 = oracle.tilde_f_second(s[i])?;
                (lhs, f2 * f2 * gs[i] * gs[i] * s[i])
            }
        };
        out.push(entry);
    }
    Ok(out)
}

/// Raw (non-enveloped) energy `h·Σ f0(ρ_i, μ_i)`; the enveloped energy never
/// exceeds it.
pub fn energy_f0(pair: &DensityPair) -> f64 {
    let h = pair.grid().h();
    let terms: Vec<f64> = pair
        .rho
        .values()
        .iter()
        .zip(pair.mu.values())
        .map(|(&a, &b)| f0(a, b))
        .collect();
    h * pairwise_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Density;
    use crate::jko::{self, JkoConfig};
    use crate::presets;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn shared_oracle() -> &'static EnvelopeOracle {
        static ORACLE: OnceLock<EnvelopeOracle> = OnceLock::new();
        ORACLE.get_or_init(EnvelopeOracle::new)
    }

    fn grid(n: usize, length: f64) -> Grid1D {
        Grid1D::new(n, length).unwrap()
    }

    /// Unit-mass pair `ρ = μ` proportional to `1 + amp·cos(2πx/L)`; on a
    /// length-2 domain the values stay below 1, so `S < 2` and every cell is
    /// in the open region.
    fn symmetric_cosine_pair(n: usize, length: f64, amp: f64) -> DensityPair {
        let g = grid(n, length);
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = g.center(i) / length;
                (1.0 + amp * (2.0 * std::f64::consts::PI * x).cos()) / length
            })
            .collect();
        DensityPair::new(
            Density::from_unnormalized(g, vals.clone()).unwrap(),
            Density::from_unnormalized(g, vals).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_energies_have_closed_forms() {
        let oracle = shared_oracle();
        let pair = presets::uniform_pair(grid(64, 1.0)).unwrap();
        // f(1,1) = 1 (both logs vanish, the product term is 1).
        assert!((energy_f(&pair, oracle).unwrap() - 1.0).abs() < 1e-12);
        assert!(energy_g(&pair).abs() < 1e-12);
    }

    #[test]
    fn block_pair_energy_matches_the_diagonal_profile() {
        let oracle = shared_oracle();
        let g = grid(64, 1.0);
        let vals: Vec<f64> = (0..64).map(|i| if i < 32 { 2.0 } else { 0.0 }).collect();
        let pair = DensityPair::new(
            Density::from_unnormalized(g, vals.clone()).unwrap(),
            Density::from_unnormalized(g, vals).unwrap(),
        )
        .unwrap();
        // Occupied cells sit on the diagonal at S = 4 (enveloped), empty
        // cells contribute nothing, so F = 0.5 * tilde_f(4).
        let expected = 0.5 * oracle.tilde_f(4.0).unwrap();
        assert!((energy_f(&pair, oracle).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn envelope_energy_never_exceeds_the_raw_energy() {
        let oracle = shared_oracle();
        for name in presets::NAMES {
            let pair = presets::by_name(name, grid(96, 1.0)).unwrap();
            let f = energy_f(&pair, oracle).unwrap();
            let raw = energy_f0(&pair);
            assert!(f <= raw + 1e-12, "{name}: {f} > {raw}");
        }
    }

    #[test]
    fn entropy_energy_closed_form_and_lower_bound() {
        let g = grid(64, 1.0);
        let block: Vec<f64> = (0..64).map(|i| if i < 32 { 2.0 } else { 0.0 }).collect();
        let pair = DensityPair::new(
            Density::from_unnormalized(g, block).unwrap(),
            Density::from_unnormalized(g, vec![1.0; 64]).unwrap(),
        )
        .unwrap();
        // Block entropy 2 ln 2 on half the domain plus zero for the uniform
        // partner: G = ln 2.
        assert!((energy_g(&pair) - std::f64::consts::LN_2).abs() < 1e-12);
        for &length in &[0.5, 1.0, 2.0] {
            let bound = -2.0 * length / std::f64::consts::E;
            for name in presets::NAMES {
                let p = presets::by_name(name, grid(48, length)).unwrap();
                assert!(energy_g(&p) >= bound, "{name} at L={length}");
            }
        }
    }

    #[test]
    fn uniform_slope_vanishes_exactly() {
        let oracle = shared_oracle();
        let pair = presets::uniform_pair(grid(48, 1.0)).unwrap();
        let b = slope_f(&pair, oracle).unwrap();
        assert_eq!(b.total(), 0.0);
        assert_eq!(b.cell_classification.len(), 48);
    }

    #[test]
    fn slope_splits_by_region() {
        let oracle = shared_oracle();
        // Mirrored steps stay in the open region: only the B-part is fed.
        let steps = presets::step_overlap(grid(64, 1.0)).unwrap();
        let b = slope_f(&steps, oracle).unwrap();
        assert_eq!(b.a_region_part, 0.0);
        assert!(b.b_region_part > 0.0);
        assert!(b.cell_classification.iter().all(|r| *r == Region::B));
        // The enveloped cosine blend feeds only the A-part.
        let blend = presets::smooth_supercritical(grid(64, 0.5)).unwrap();
        let a = slope_f(&blend, oracle).unwrap();
        assert_eq!(a.b_region_part, 0.0);
        assert!(a.a_region_part > 0.0);
        assert!(a.cell_classification.iter().all(|r| *r == Region::A));
    }

    #[test]
    fn enveloped_slope_matches_the_composite_gradient_identity() {
        let oracle = shared_oracle();
        let pair = presets::smooth_supercritical(grid(64, 0.5)).unwrap();
        let slope = slope_f(&pair, oracle).unwrap();
        // On an all-A pair the bound is an identity, so the slope equals the
        // integrated composite-gradient form.
        let h = pair.grid().h();
        let lhs_terms: Vec<f64> = gradient_bound_terms(&pair, oracle)
            .unwrap()
            .iter()
            .map(|&(lhs, _)| lhs)
            .collect();
        let integrated = h * pairwise_sum(&lhs_terms);
        let rel = (slope.total() - integrated).abs() / slope.total();
        assert!(rel < 1e-6, "relative gap {rel}");
    }

    #[test]
    fn symmetric_open_region_slope_has_a_closed_reduction() {
        let oracle = shared_oracle();
        let pair = symmetric_cosine_pair(64, 2.0, 0.3);
        let b = slope_f(&pair, oracle).unwrap();
        assert_eq!(b.a_region_part, 0.0);
        // With rho = mu the two species terms coincide:
        // slope = 2 h sum |grad rho|^2 (1 + rho)^2 / rho.
        let h = pair.grid().h();
        let rho = pair.rho.values();
        let grho = forward_diff(rho, h);
        let terms: Vec<f64> = (0..rho.len())
            .map(|i| {
                let c = 1.0 + rho[i];
                2.0 * grho[i] * grho[i] * c * c / rho[i]
            })
            .collect();
        let expected = h * pairwise_sum(&terms);
        assert!((b.total() - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn literal_convention_is_a_distinct_reading() {
        let oracle = shared_oracle();
        let pair = presets::two_bumps(grid(64, 1.0)).unwrap();
        let expanded = slope_f_with(&pair, oracle, SlopeConvention::Expanded).unwrap();
        let literal = slope_f_with(&pair, oracle, SlopeConvention::Literal).unwrap();
        assert!(expanded.total() >= 0.0);
        assert!(literal.total() >= 0.0);
        assert!((expanded.total() - literal.total()).abs() > 1e-9);
    }

    #[test]
    fn midpoint_weights_recover_the_classical_rule() {
        // Midpoints of a uniform 4-partition get weight 1/4 each.
        let w = midpoint_weights(&[0.125, 0.375, 0.625, 0.875]).unwrap();
        for &x in &w {
            assert!((x - 0.25).abs() < 1e-15);
        }
        // The default eighth-grid: first node soaks up the left margin.
        let nodes: Vec<f64> = (1..=8).map(|k| k as f64 / 8.0).collect();
        let w = midpoint_weights(&nodes).unwrap();
        assert!((w[0] - 3.0 / 16.0).abs() < 1e-15);
        for &x in &w[1..7] {
            assert!((x - 0.125).abs() < 1e-15);
        }
        assert!((w[7] - 1.0 / 16.0).abs() < 1e-15);
        assert!((pairwise_sum(&w) - 1.0).abs() < 1e-15);
        assert!(midpoint_weights(&[]).is_err());
        assert!(midpoint_weights(&[0.5, 0.25]).is_err());
        assert!(midpoint_weights(&[0.0, 0.5]).is_err());
        assert!(midpoint_weights(&[0.5, 1.5]).is_err());
    }

    #[test]
    fn gradient_bound_holds_pointwise_on_presets() {
        let oracle = shared_oracle();
        for (name, length) in [
            ("two_bumps", 1.0),
            ("step_overlap", 1.0),
            ("supercritical", 1.0),
            ("smooth_supercritical", 0.5),
        ] {
            let pair = presets::by_name(name, grid(96, length)).unwrap();
            for (i, (lhs, rhs)) in gradient_bound_terms(&pair, oracle)
                .unwrap()
                .into_iter()
                .enumerate()
            {
                assert!(
                    rhs - lhs >= -1e-12 * rhs.max(1.0),
                    "{name} cell {i}: lhs {lhs} rhs {rhs}"
                );
            }
        }
    }

    #[test]
    fn stationary_trajectory_ledger_is_zero() {
        let oracle = shared_oracle();
        let pair = presets::uniform_pair(grid(32, 1.0)).unwrap();
        let mut cfg = JkoConfig::new(1e-3, 1e-4).unwrap();
        cfg.dg_nodes = vec![0.25, 0.5, 0.75, 1.0];
        let traj = jko::run_trajectory(oracle, &cfg, &pair, 2).unwrap();
        let ledger = edi_report(&traj, oracle).unwrap();
        assert!(ledger.kinetic_rho.abs() < 1e-10);
        assert!(ledger.kinetic_mu.abs() < 1e-10);
        assert!(ledger.slope_integral.abs() < 1e-10);
        assert!(ledger.residual.abs() < 1e-8);
        for step in &ledger.per_step {
            assert!(step.flow_interchange_lhs.abs() < 1e-8);
            assert!(step.flow_interchange_rhs >= 0.0);
            assert!(step.flow_interchange_rhs < 1e-8);
        }
    }

    #[test]
    fn two_bump_ledger_satisfies_the_dissipation_chain() {
        let oracle = shared_oracle();
        let n = 48;
        let pair = presets::two_bumps(grid(n, 1.0)).unwrap();
        let eps = 1e-4;
        let cfg = JkoConfig::new(1e-3, eps).unwrap();
        let steps = 6;
        let traj = jko::run_trajectory(oracle, &cfg, &pair, steps).unwrap();
        let ledger = edi_report(&traj, oracle).unwrap();
        let h = 1.0 / n as f64;
        let per_step_slack = 10.0 * eps + 10.0 * h;

        assert_eq!(ledger.per_step.len(), steps);
        assert!(ledger.kinetic_rho > 0.0);
        assert!(ledger.kinetic_mu > 0.0);
        assert!(ledger.slope_integral > 0.0);
        assert!(
            ledger.residual >= -(steps as f64) * per_step_slack,
            "residual {}",
            ledger.residual
        );
        let energy_slack = 10.0 * eps; // 10·eps_reg·n·h with n·h = L = 1
        for step in &ledger.per_step {
            // Per-step energy decrease including the transport penalty.
            let penalized = step.f_after + (step.w2sq_rho + step.w2sq_mu) / (2.0 * cfg.tau);
            assert!(
                penalized <= step.f_before + energy_slack,
                "step {}: {} > {}",
                step.k,
                penalized,
                step.f_before
            );
            // Entropy decrease dominates its dissipation bound.
            assert!(
                step.flow_interchange_lhs >= step.flow_interchange_rhs - per_step_slack,
                "step {}: lhs {} rhs {}",
                step.k,
                step.flow_interchange_lhs,
                step.flow_interchange_rhs
            );
            assert!(step.slope_quad >= 0.0);
        }
        // The kinetic terms restate the per-step transport costs.
        let kin: f64 = ledger.per_step.iter().map(|s| s.w2sq_rho / cfg.tau).sum();
        assert!((ledger.kinetic_rho - kin).abs() <= 1e-12 * kin.max(1.0));
    }

    #[test]
    fn ledger_serializes_with_stable_field_names() {
        let ledger = EdiLedger {
            f_initial: 1.0,
            f_final: 0.5,
            kinetic_rho: 0.25,
            kinetic_mu: 0.25,
            slope_integral: 0.5,
            residual: 0.0,
            per_step: vec![StepLedger {
                k: 0,
                f_before: 1.0,
                f_after: 0.5,
                w2sq_rho: 0.1,
                w2sq_mu: 0.1,
                slope_quad: 0.5,
                flow_interchange_lhs: 0.2,
                flow_interchange_rhs: 0.1,
            }],
        };
        let value = serde_json::to_value(&ledger).unwrap();
        let top: Vec<&str> = value.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut expected_top = vec![
            "f_initial",
            "f_final",
            "kinetic_rho",
            "kinetic_mu",
            "slope_integral",
            "residual",
            "per_step",
        ];
        let mut got_top = top.clone();
        got_top.sort_unstable();
        expected_top.sort_unstable();
        assert_eq!(got_top, expected_top);
        let step = value["per_step"][0].as_object().unwrap();
        let mut got: Vec<&str> = step.keys().map(|k| k.as_str()).collect();
        got.sort_unstable();
        let mut expected = vec![
            "k",
            "f_before",
            "f_after",
            "w2sq_rho",
            "w2sq_mu",
            "slope_quad",
            "flow_interchange_lhs",
            "flow_interchange_rhs",
        ];
        expected.sort_unstable();
        assert_eq!(got, expected);
        let round: EdiLedger = serde_json::from_value(value).unwrap();
        assert_eq!(round.per_step.len(), 1);
    }

    #[test]
    fn missing_interpolation_samples_are_rejected() {
        let oracle = shared_oracle();
        let pair = presets::uniform_pair(grid(16, 1.0)).unwrap();
        let cfg = JkoConfig::new(1e-3, 1e-3).unwrap();
        let step = jko::jko_step(oracle, &cfg, &pair).unwrap();
        let n = step.next.rho.values().len();
        let traj = Trajectory {
            initial: pair,
            tau: cfg.tau,
            steps: vec![crate::jko::StepRecord {
                result: step,
                de_giorgi: Vec::new(),
                velocity_rho: vec![0.0; n],
                velocity_mu: vec![0.0; n],
            }],
        };
        assert!(matches!(
            edi_report(&traj, oracle),
            Err(Error::MissingDeGiorgiSamples)
        ));
    }

    #[test]
    fn chain_rule_vanishes_when_nothing_moves() {
        let oracle = shared_oracle();
        let pair = presets::uniform_pair(grid(32, 1.0)).unwrap();
        let mut cfg = JkoConfig::new(1e-3, 1e-4).unwrap();
        cfg.dg_nodes = vec![0.5, 1.0];
        let traj = jko::run_trajectory(oracle, &cfg, &pair, 2).unwrap();
        assert!(chain_rule_check(&traj, GChoice::TildeFOfSum, oracle).unwrap() < 1e-10);
        assert!(chain_rule_check(&traj, GChoice::FFull, oracle).unwrap() < 1e-10);
    }

    #[test]
    fn chain_rule_refines_with_the_grid() {
        let oracle = shared_oracle();
        let run = |n: usize| -> Trajectory {
            let pair = presets::smooth_supercritical(grid(n, 0.5)).unwrap();
            let mut cfg = JkoConfig::new(2e-4, 1e-4).unwrap();
            cfg.dg_nodes = vec![0.5, 1.0];
            jko::run_trajectory(oracle, &cfg, &pair, 4).unwrap()
        };
        let coarse = chain_rule_check(&run(32), GChoice::TildeFOfSum, oracle).unwrap();
        let fine = chain_rule_check(&run(64), GChoice::TildeFOfSum, oracle).unwrap();
        assert!(
            coarse / fine >= 1.5,
            "coarse {coarse:.3e} fine {fine:.3e} ratio {:.2}",
            coarse / fine
        );
    }

    #[test]
    fn chain_rule_refines_in_the_open_region() {
        let oracle = shared_oracle();
        let run = |n: usize| -> Trajectory {
            let pair = symmetric_cosine_pair(n, 2.0, 0.3);
            let mut cfg = JkoConfig::new(2e-4, 1e-4).unwrap();
            cfg.dg_nodes = vec![0.5, 1.0];
            jko::run_trajectory(oracle, &cfg, &pair, 4).unwrap()
        };
        let coarse = chain_rule_check(&run(32), GChoice::FFull, oracle).unwrap();
        let fine = chain_rule_check(&run(64), GChoice::FFull, oracle).unwrap();
        assert!(
            coarse / fine >= 1.5,
            "coarse {coarse:.3e} fine {fine:.3e} ratio {:.2}",
            coarse / fine
        );
    }

    proptest! {
        #[test]
        fn dissipation_form_is_nonnegative_in_the_open_region(
            a in 1e-6f64..50.0,
            b in 1e-6f64..50.0,
            ga in -10.0f64..10.0,
            gb in -10.0f64..10.0,
        ) {
            let oracle = shared_oracle();
            prop_assume!(oracle.classify(a, b) == Region::B);
            prop_assert!(dissipation_form(a, b, ga, gb, oracle.r0()) >= -1e-12);
        }

        #[test]
        fn midpoint_weights_form_a_partition(
            raw in proptest::collection::vec(1e-6f64..1.0, 1..12)
        ) {
            let mut nodes = raw;
            nodes.sort_by(f64::total_cmp);
            let w = midpoint_weights(&nodes).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((pairwise_sum(&w) - 1.0).abs() < 1e-12);
        }
    }
}
