//! Uniform 1-D grid and cell-averaged densities.
//!
//! A [`Grid1D`] is `n` equal cells tiling `[0, L]`. The grid stores `n` and
//! the cell width `h`; the length is *defined* as `h * n` so the identity
//! `h * n == length()` is exact in the chosen representation. Densities are
//! vectors of nonnegative cell averages with unit mass `h * Σ v_i = 1`.

use crate::numerics::pairwise_sum;
use crate::{Error, Result};

/// Mass tolerance accepted by [`Density::new`].
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    n_cells: usize,
    h: f64,
}

impl Grid1D {
    /// Grid of `n_cells` cells on `[0, length]`.
    pub fn new(n_cells: usize, length: f64) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::Domain("grid needs at least one cell"));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Domain("grid length must be positive and finite"));
        }
        Ok(Grid1D {
            n_cells,
            h: length / n_cells as f64,
        })
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Domain length; exactly `h * n_cells`.
    #[inline]
    pub fn length(&self) -> f64 {
        self.h * self.n_cells as f64
    }

    /// Center of cell `i`.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h
    }

    /// Left edge of cell `i`; `edge(n_cells)` is the right end of the domain.
    #[inline]
    pub fn edge(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }
}

/// Nonnegative cell averages with unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    grid: Grid1D,
    values: Vec<f64>,
}

impl Density {
    /// Wraps validated values: length matches the grid, all entries are
    /// nonnegative and finite, and `h * Σ v` is 1 within [`MASS_TOL`].
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch {
                left: grid.n_cells(),
                right: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::NegativeValue { index: i, value: v });
            }
        }
        let mass = grid.h() * pairwise_sum(&values);
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::NotNormalized {
                mass,
                tol: MASS_TOL,
            });
        }
        Ok(Density { grid, values })
    }

    /// Normalizes an arbitrary nonnegative profile to unit mass.
    pub fn from_unnormalized(grid: Grid1D, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch {
                left: grid.n_cells(),
                right: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::NegativeValue { index: i, value: v });
            }
        }
        let mass = grid.h() * pairwise_sum(&values);
        if !(mass > 0.0) {
            return Err(Error::Domain("cannot normalize a zero profile"));
        }
        for v in &mut values {
            *v /= mass;
        }
        Ok(Density { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.h() * pairwise_sum(&self.values)
    }
}

/// The two species evolved jointly by the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPair {
    pub rho: Density,
    pub mu: Density,
}

impl DensityPair {
    pub fn new(rho: Density, mu: Density) -> Result<Self> {
        if rho.grid() != mu.grid() {
            return Err(Error::GridMismatch {
                left: rho.grid().n_cells(),
                right: mu.grid().n_cells(),
            });
        }
        Ok(DensityPair { rho, mu })
    }

    #[inline]
    pub fn grid(&self) -> Grid1D {
        self.rho.grid()
    }

    /// Pointwise sum `S = rho + mu` per cell.
    pub fn s_sum(&self) -> Vec<f64> {
        self.rho
            .values()
            .iter()
            .zip(self.mu.values())
            .map(|(a, b)| a + b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_identity_is_exact() {
        for &(n, l) in &[(128usize, 1.0), (100, 1.0), (7, 0.35), (256, 0.5)] {
            let g = Grid1D::new(n, l).unwrap();
            assert_eq!(g.h() * g.n_cells() as f64, g.length());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Grid1D::new(0, 1.0).is_err());
        assert!(Grid1D::new(4, -1.0).is_err());
        let g = Grid1D::new(4, 1.0).unwrap();
        assert!(Density::new(g, vec![1.0; 3]).is_err());
        assert!(Density::new(g, vec![-1.0, 2.0, 2.0, 1.0]).is_err());
        // mass 2, not 1
        assert!(Density::new(g, vec![2.0; 4]).is_err());
        assert!(Density::new(g, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn normalization_round_trip() {
        let g = Grid1D::new(10, 2.0).unwrap();
        let d = Density::from_unnormalized(g, (0..10).map(|i| i as f64).collect()).unwrap();
        assert!((d.mass() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn pair_requires_matching_grids() {
        let g1 = Grid1D::new(8, 1.0).unwrap();
        let g2 = Grid1D::new(9, 1.0).unwrap();
        let a = Density::new(g1, vec![1.0; 8]).unwrap();
        let b = Density::new(g2, vec![1.0; 9]).unwrap();
        assert!(DensityPair::new(a.clone(), b).is_err());
        let c = Density::new(g1, vec![1.0; 8]).unwrap();
        let p = DensityPair::new(a, c).unwrap();
        assert_eq!(p.s_sum(), vec![2.0; 8]);
    }
}
