//! Numerical laboratory for the Wasserstein gradient flow of a convexified
//! two-species energy.
//!
//! The energy density is the convex envelope of
//! `f0(a, b) = a·ln a + b·ln b + a·b` on the closed quadrant. The envelope is
//! obtained by convexifying `f0` along the diagonals `a + b = s`, which splits
//! the quadrant into a closed region A (where the envelope is a function of
//! `s` alone) and its open complement B (where the envelope equals `f0`).
//! [`envelope`] evaluates all of that pointwise; [`transport`] provides exact
//! quantile-based and entropic 1-D quadratic optimal transport on a uniform
//! grid; [`jko`] implements the minimizing-movement (JKO) scheme together
//! with variational-interpolation substeps; [`slope`] evaluates energies,
//! the metric slope, and the energy-dissipation ledger; [`kernels`] builds the
//! heavy-tailed mollifier family used by the H1-convolution certification.
//!
//! Everything is deterministic: no threads, no wall-clock input, explicit
//! seeds for every random battery. Floating-point accumulations that feed
//! reports go through pairwise summation ([`numerics::pairwise_sum`]) so the
//! same bytes come out of every run.

pub mod certify;
pub mod envelope;
pub mod grid;
pub mod jko;
pub mod kernels;
pub mod numerics;
pub mod presets;
pub mod slope;
pub mod transport;

/// Crate-wide error type.
///
/// Numerical failures carry enough context to be reported machine-readably;
/// `TrajectoryAborted` keeps the partial trajectory so a caller can inspect
/// what was computed before the failing step.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(&'static str),

    #[error("grid mismatch: {left} vs {right} cells")]
    GridMismatch { left: usize, right: usize },

    #[error("density mass {mass} is not 1 within {tol}")]
    NotNormalized { mass: f64, tol: f64 },

    #[error("negative value {value} at cell {index}")]
    NegativeValue { index: usize, value: f64 },

    #[error("root finding failed: {0}")]
    RootFind(&'static str),

    #[error(
        "scaling iterations stalled: L1 marginal error {marginal_error:.3e} after {iters} \
         iterations (tol {tol:.3e})"
    )]
    ScalingNotConverged {
        iters: usize,
        marginal_error: f64,
        tol: f64,
    },

    #[error("pointwise prox failed at cell {cell}: {detail}")]
    ProxFailure { cell: usize, detail: &'static str },

    #[error("trajectory aborted at step {step}: {source}")]
    TrajectoryAborted {
        step: usize,
        partial: Box<jko::Trajectory>,
        #[source]
        source: Box<Error>,
    },

    #[error("time {t} outside trajectory range [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("trajectory carries no variational-interpolation samples")]
    MissingDeGiorgiSamples,

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
