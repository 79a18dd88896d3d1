//! Canonical initial conditions for the flow experiments.
//!
//! Every preset returns a [`DensityPair`] of unit-mass densities on the
//! supplied grid. Values are sampled at cell centers and renormalized, so a
//! preset evaluated on `n` and `2n` cells discretizes the same continuum
//! field.

use crate::grid::{Density, DensityPair, Grid1D};
use crate::{Error, Result};

pub const NAMES: &[&str] = &[
    "uniform",
    "two_bumps",
    "step_overlap",
    "supercritical",
    "smooth_supercritical",
];

/// Normalized Gaussian bump centered at `center` with width `sigma`.
pub fn gaussian_bump(grid: Grid1D, center: f64, sigma: f64) -> Result<Density> {
    if !(sigma > 0.0) {
        return Err(Error::Domain("bump width must be positive"));
    }
    let values = (0..grid.n_cells())
        .map(|i| {
            let z = (grid.center(i) - center) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    Density::from_unnormalized(grid, values)
}

/// Both species uniform.
pub fn uniform_pair(grid: Grid1D) -> Result<DensityPair> {
    let flat = vec![1.0; grid.n_cells()];
    DensityPair::new(
        Density::from_unnormalized(grid, flat.clone())?,
        Density::from_unnormalized(grid, flat)?,
    )
}

/// Separated species: rho bumped at L/4, mu at 3L/4, width L/16.
pub fn two_bumps(grid: Grid1D) -> Result<DensityPair> {
    let length = grid.length();
    DensityPair::new(
        gaussian_bump(grid, 0.25 * length, length / 16.0)?,
        gaussian_bump(grid, 0.75 * length, length / 16.0)?,
    )
}

/// Mirrored two-level steps: rho is 1.5/L on the left half and 0.5/L on the
/// right, mu the mirror image. The pointwise product is 0.75/L² throughout,
/// so on the unit interval the pair sits inside the non-enveloped region.
pub fn step_overlap(grid: Grid1D) -> Result<DensityPair> {
    let n = grid.n_cells();
    let length = grid.length();
    let mid = 0.5 * length;
    let (hi, lo) = (1.5 / length, 0.5 / length);
    let rho: Vec<f64> = (0..n)
        .map(|i| if grid.center(i) < mid { hi } else { lo })
        .collect();
    let mu: Vec<f64> = (0..n)
        .map(|i| if grid.center(i) < mid { lo } else { hi })
        .collect();
    DensityPair::new(
        Density::from_unnormalized(grid, rho)?,
        Density::from_unnormalized(grid, mu)?,
    )
}

/// Co-centered identical bumps whose width is bisected so the peak density
/// is 2 — the peak product 4 then exceeds the mixing threshold 1 and the
/// envelope is active at the center. If even a near-uniform profile exceeds
/// peak 2 (domains shorter than 1/2), the widest width is kept.
pub fn supercritical(grid: Grid1D) -> Result<DensityPair> {
    let length = grid.length();
    let center = 0.5 * length;
    let peak = |sigma: f64| -> Result<f64> {
        let d = gaussian_bump(grid, center, sigma)?;
        Ok(d.values().iter().cloned().fold(0.0, f64::max))
    };
    let (mut lo, mut hi) = (0.25 * grid.h(), 10.0 * length);
    let sigma = if peak(hi)? >= 2.0 {
        hi
    } else {
        // peak(sigma) decreases from huge to sub-2: bisect to peak = 2
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if peak(mid)? >= 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * length {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let d = gaussian_bump(grid, center, sigma)?;
    DensityPair::new(d.clone(), d)
}

/// Smooth strictly positive cosine blends. On domains of length ~1/2 the
/// sum rho + mu stays above 2 with margin everywhere, keeping the whole
/// profile inside the enveloped region.
pub fn smooth_supercritical(grid: Grid1D) -> Result<DensityPair> {
    let n = grid.n_cells();
    let length = grid.length();
    let base = 1.0 / length;
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            let x = grid.center(i) / length;
            base * (1.0 + 0.15 * (2.0 * std::f64::consts::PI * x).cos())
        })
        .collect();
    let mu: Vec<f64> = (0..n)
        .map(|i| {
            let x = grid.center(i) / length;
            base * (1.0 + 0.15 * (4.0 * std::f64::consts::PI * x).cos())
        })
        .collect();
    DensityPair::new(
        Density::from_unnormalized(grid, rho)?,
        Density::from_unnormalized(grid, mu)?,
    )
}

/// Look up a preset by its CLI name.
pub fn by_name(name: &str, grid: Grid1D) -> Result<DensityPair> {
    match name {
        "uniform" => uniform_pair(grid),
        "two_bumps" => two_bumps(grid),
        "step_overlap" => step_overlap(grid),
        "supercritical" => supercritical(grid),
        "smooth_supercritical" => smooth_supercritical(grid),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (expected one of {})",
            NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{EnvelopeOracle, Region};

    fn grid(n: usize, length: f64) -> Grid1D {
        Grid1D::new(n, length).unwrap()
    }

    #[test]
    fn all_presets_have_unit_masses() {
        let g = grid(96, 1.0);
        for name in NAMES {
            let pair = by_name(name, g).unwrap();
            assert!((pair.rho.mass() - 1.0).abs() < 1e-12, "{name}");
            assert!((pair.mu.mass() - 1.0).abs() < 1e-12, "{name}");
        }
        assert!(by_name("nope", g).is_err());
    }

    #[test]
    fn step_overlap_product_is_three_quarters() {
        let pair = step_overlap(grid(64, 1.0)).unwrap();
        for (r, m) in pair.rho.values().iter().zip(pair.mu.values()) {
            assert!((r * m - 0.75).abs() < 1e-12);
        }
        let oracle = EnvelopeOracle::new();
        for (r, m) in pair.rho.values().iter().zip(pair.mu.values()) {
            assert_eq!(oracle.classify(*r, *m), Region::B);
        }
    }

    #[test]
    fn supercritical_peak_hits_two() {
        let pair = supercritical(grid(128, 1.0)).unwrap();
        let peak = pair.rho.values().iter().cloned().fold(0.0, f64::max);
        assert!((peak - 2.0).abs() < 1e-6, "peak = {peak}");
        let oracle = EnvelopeOracle::new();
        let i = pair
            .rho
            .values()
            .iter()
            .position(|&v| v == peak)
            .unwrap();
        assert_eq!(
            oracle.classify(pair.rho.values()[i], pair.mu.values()[i]),
            Region::A
        );
    }

    #[test]
    fn smooth_supercritical_is_enveloped_on_half_domain() {
        let pair = smooth_supercritical(grid(64, 0.5)).unwrap();
        let oracle = EnvelopeOracle::new();
        for (r, m) in pair.rho.values().iter().zip(pair.mu.values()) {
            assert!(r + m > 2.0);
            assert_eq!(oracle.classify(*r, *m), Region::A);
        }
    }

    #[test]
    fn two_bumps_are_separated() {
        let pair = two_bumps(grid(64, 1.0)).unwrap();
        let r = pair.rho.values();
        let m = pair.mu.values();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(r), 16);
        assert_eq!(argmax(m), 48);
    }
}
