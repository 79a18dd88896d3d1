//! Pointwise evaluation of the convex envelope `f` of
//! `f0(a, b) = a·ln a + b·ln b + a·b`.
//!
//! Restricted to a diagonal `a + b = s`, `f0` becomes
//! `g(a) = a·ln a + (s-a)·ln(s-a) + a(s-a)`, which is strictly convex for
//! `s <= 2` and a symmetric double well for `s > 2` with minimizers
//! `alpha(s) < s/2 < beta(s)`, `alpha + beta = s`. Convexifying along every
//! diagonal replaces `f0` between the wells by its common minimum value
//! `tilde_f(s) = f0(alpha(s), beta(s))`, producing the envelope
//!
//! ```text
//! f(a,b) = tilde_f(a+b)   on A = { a+b >= 2, min(a,b) >= alpha(a+b) }
//! f(a,b) = f0(a,b)        on B = complement of A in the quadrant
//! ```
//!
//! The gluing is C^1: both one-sided gradients equal
//! `(tilde_f'(s), tilde_f'(s))` on the well curve. All quantities derived
//! from the well position — `pi(s) = alpha·beta`, `tilde_f` and its two
//! derivatives — reduce to one scalar root of `g'` per diagonal, found by a
//! safeguarded Newton iteration in `u = ln(alpha)` coordinates so the same
//! code path survives both the degenerate limit `s -> 2` (where the wells
//! collide at 1) and the stiff tail `s -> infinity` (where `alpha ~ s e^-s`
//! underflows f64 but `u` stays exact).

use crate::numerics::xlogx;
use crate::{Error, Result};

/// Which branch of the envelope applies at a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Closed region where `f = tilde_f(a+b)`.
    A,
    /// Open complement where `f = f0`.
    B,
}

/// `f0(a, b) = a ln a + b ln b + ab` with the `0·ln 0 = 0` convention.
#[inline]
pub fn f0(a: f64, b: f64) -> f64 {
    xlogx(a) + xlogx(b) + a * b
}

/// Result of one well solve. `u = ln(alpha)` is kept because `alpha` itself
/// underflows for `s` beyond ~745 while `u` remains exact.
#[derive(Debug, Clone, Copy)]
pub struct WellSolve {
    pub alpha: f64,
    pub beta: f64,
    pub u: f64,
    /// True when `s` fell inside the near-degenerate band `(2, s_switch]`
    /// and the midpoint clamp was returned instead of a root find.
    pub clamped: bool,
}

/// Evaluator for the envelope and everything derived from it.
///
/// Construction eagerly measures `r0 = inf_{s>2} s·tilde_f''(s)` by scanning
/// a fixed log-spaced grid (10^4 points in (2, 10^4] plus 10^3 extra points
/// packed into (2, 2.1]); the infimum sits at the `s -> 2` end and is
/// *measured*, not assumed.
#[derive(Debug, Clone)]
pub struct EnvelopeOracle {
    newton_tol: f64,
    s_switch: f64,
    r0: f64,
}

/// Below this offset from the degenerate end, `pi` and `tilde_f''` are
/// cancellation-amplified: the residual criterion alone bounds the alpha
/// error only by `newton_tol / g''(alpha) ~ newton_tol / (2(s-2))`, which is
/// no longer negligible against `s/2 - alpha ~ sqrt(3(s-2)/2)`. Those
/// quantities therefore upgrade the solve to full bisection refinement here.
const REFINE_BELOW_OFFSET: f64 = 1e-4;

impl Default for EnvelopeOracle {
    fn default() -> Self {
        Self::new()
    }
}

impl EnvelopeOracle {
    pub fn new() -> Self {
        Self::with_params(1e-12, 2.0 + 1e-10).expect("default parameters are valid")
    }

    /// `newton_tol` is the accepted residual `|g'(alpha)|`; `s_switch` is the
    /// top of the band where the well collapse makes the root meaningless in
    /// f64 and the midpoint clamp takes over.
    pub fn with_params(newton_tol: f64, s_switch: f64) -> Result<Self> {
        if !(newton_tol > 0.0) {
            return Err(Error::Domain("newton_tol must be positive"));
        }
        if !(s_switch > 2.0) {
            return Err(Error::Domain("s_switch must exceed 2"));
        }
        let mut oracle = EnvelopeOracle {
            newton_tol,
            s_switch,
            r0: f64::NAN,
        };
        oracle.r0 = oracle.scan_r0();
        Ok(oracle)
    }

    /// Measured infimum of `s·tilde_f''(s)` over the scan grid.
    #[inline]
    pub fn r0(&self) -> f64 {
        self.r0
    }

    #[inline]
    pub fn newton_tol(&self) -> f64 {
        self.newton_tol
    }

    #[inline]
    pub fn s_switch(&self) -> f64 {
        self.s_switch
    }

    /// Diagonal restriction `g(a) = f0(a, s-a)`.
    pub fn g_value(&self, a: f64, s: f64) -> Result<f64> {
        check_diagonal(a, s)?;
        Ok(f0(a, s - a))
    }

    /// `g'(a) = ln a - ln(s-a) + s - 2a`.
    pub fn g_prime(&self, a: f64, s: f64) -> Result<f64> {
        check_diagonal(a, s)?;
        Ok(g_prime_impl(a, s))
    }

    /// `g''(a) = 1/a + 1/(s-a) - 2`.
    pub fn g_second(&self, a: f64, s: f64) -> Result<f64> {
        check_diagonal(a, s)?;
        Ok(1.0 / a + 1.0 / (s - a) - 2.0)
    }

    /// Well positions `(alpha(s), beta(s))` for `s >= 2`; exactly `(1, 1)`
    /// at `s = 2`. For very large `s`, `alpha ~ s e^-s` gracefully
    /// underflows to 0 while `beta = s - alpha` stays exact.
    pub fn alpha_beta(&self, s: f64) -> Result<(f64, f64)> {
        let w = self.solve_well(s)?;
        Ok((w.alpha, w.beta))
    }

    /// Same as [`Self::alpha_beta`] but exposing `ln(alpha)` and the
    /// near-degenerate clamp flag.
    pub fn well(&self, s: f64) -> Result<WellSolve> {
        self.solve_well(s)
    }

    /// Well product `pi(s) = alpha(s)·beta(s)`; equals 1 at `s = 2` and
    /// decreases to 0. Inside the clamp band the first-order limit
    /// `1 - (s-2)/2` is used so that `pi` stays <= 1 and differentiable.
    pub fn pi_value(&self, s: f64) -> Result<f64> {
        if !(s >= 2.0) {
            return Err(Error::Domain("pi(s) needs s >= 2"));
        }
        if s == 2.0 {
            return Ok(1.0);
        }
        if s <= self.s_switch {
            return Ok(1.0 - 0.5 * (s - 2.0));
        }
        let refine = s - 2.0 < REFINE_BELOW_OFFSET;
        let w = self.solve_well_inner(s, refine)?;
        Ok(w.alpha * w.beta)
    }

    /// `pi'(s) = -pi(s)(s-2) / (s - 2 pi(s))`; the limit value -1/2 is
    /// returned at `s = 2` and the band uses the exact derivative of the
    /// band formula, `-pi/2`.
    pub fn pi_prime(&self, s: f64) -> Result<f64> {
        if !(s >= 2.0) {
            return Err(Error::Domain("pi'(s) needs s >= 2"));
        }
        if s == 2.0 {
            return Ok(-0.5);
        }
        if s <= self.s_switch {
            return Ok(-0.5 * (1.0 - 0.5 * (s - 2.0)));
        }
        let pi = self.pi_value(s)?;
        let denom = s - 2.0 * pi;
        debug_assert!(denom > 0.0, "s - 2 pi must be positive for s > 2");
        Ok(-pi * (s - 2.0) / denom)
    }

    /// Common well depth `tilde_f(s) = f0(alpha(s), beta(s))`; not extended
    /// below `s = 2`.
    pub fn tilde_f(&self, s: f64) -> Result<f64> {
        let w = self.solve_well(s)?;
        Ok(f0(w.alpha, w.beta))
    }

    /// `tilde_f'(s) = ln(alpha) + 1 + beta`, evaluated through `u = ln alpha`
    /// so the tail `s -> infinity` (where `alpha` underflows) stays finite.
    pub fn tilde_f_prime(&self, s: f64) -> Result<f64> {
        let w = self.solve_well(s)?;
        Ok(w.u + 1.0 + w.beta)
    }

    /// `tilde_f''(s) = (1 - pi(s)) / (s - 2 pi(s)) >= 0`; value 1/4 at the
    /// degenerate end (the clamp-band formula reduces to exactly 1/4, so the
    /// band returns that constant rather than a 0/0-prone quotient).
    pub fn tilde_f_second(&self, s: f64) -> Result<f64> {
        if !(s >= 2.0) {
            return Err(Error::Domain("tilde_f''(s) needs s >= 2"));
        }
        if s <= self.s_switch {
            return Ok(0.25);
        }
        let pi = self.pi_value(s)?;
        Ok((1.0 - pi) / (s - 2.0 * pi))
    }

    /// Envelope region of `(a, b)`: A iff `a + b >= 2` and
    /// `min(a, b) >= alpha(a+b)`, ties going to A.
    ///
    /// The root find is skipped whenever one of the cheap exact sandwiches
    /// decides the comparison: `min >= s/2`, `min >= 1`, or `ab >= 1` force A
    /// (since `alpha <= min(1, s/2)` and B lies strictly inside `{ab < 1}`),
    /// while `min < (s-1)e^{-s} <= alpha` forces B and
    /// `min >= s·e^{2-s} >= alpha` forces A.
    pub fn classify(&self, a: f64, b: f64) -> Region {
        let s = a + b;
        if !(s >= 2.0) {
            return Region::B;
        }
        let m = a.min(b);
        if m >= 0.5 * s || m >= 1.0 || a * b >= 1.0 {
            return Region::A;
        }
        if m >= s * (2.0 - s).exp() {
            return Region::A;
        }
        if m < (s - 1.0) * (-s).exp() {
            return Region::B;
        }
        match self.solve_well(s) {
            Ok(w) => {
                if m >= w.alpha {
                    Region::A
                } else {
                    Region::B
                }
            }
            Err(_) => Region::B,
        }
    }

    /// Envelope value `f(a, b)`.
    pub fn f_value(&self, a: f64, b: f64) -> Result<f64> {
        check_quadrant(a, b)?;
        match self.classify(a, b) {
            Region::A => self.tilde_f(a + b),
            Region::B => Ok(f0(a, b)),
        }
    }

    /// Envelope gradient. On A both components equal `tilde_f'(a+b)`; on B
    /// they are `(ln a + b + 1, ln b + a + 1)`, which is `-inf` on the axes
    /// — returned as a signaled infinity rather than an error so integrands
    /// weighted by a vanishing density stay computable.
    pub fn f_grad(&self, a: f64, b: f64) -> Result<(f64, f64)> {
        check_quadrant(a, b)?;
        match self.classify(a, b) {
            Region::A => {
                let t = self.tilde_f_prime(a + b)?;
                Ok((t, t))
            }
            Region::B => Ok((a.ln() + b + 1.0, b.ln() + a + 1.0)),
        }
    }

    // ---- internals ------------------------------------------------------

    fn solve_well(&self, s: f64) -> Result<WellSolve> {
        self.solve_well_inner(s, false)
    }

    /// `refine = true` continues past the residual criterion with plain sign
    /// bisection until the bracket is exhausted at f64 resolution. The sign
    /// of `g'` stays trustworthy far below the residual tolerance (the atanh
    /// form has no cancellation), so this pins `u` to machine precision at a
    /// cost of ~50 extra evaluations — used by the quantities that are
    /// cancellation-amplified near the degenerate end.
    fn solve_well_inner(&self, s: f64, refine: bool) -> Result<WellSolve> {
        if !(s >= 2.0) {
            return Err(Error::Domain("well positions need s >= 2"));
        }
        if s == 2.0 {
            return Ok(WellSolve {
                alpha: 1.0,
                beta: 1.0,
                u: 0.0,
                clamped: false,
            });
        }
        if s <= self.s_switch {
            // wells closer than fp can resolve through g'; clamp to midpoint
            let a = 0.5 * s;
            return Ok(WellSolve {
                alpha: a,
                beta: a,
                u: a.ln(),
                clamped: true,
            });
        }

        // g'(e^u) evaluated without forming ln(alpha) from a possibly
        // underflowed alpha; the atanh form keeps the sign exact near s/2.
        let f = |u: f64| -> f64 {
            let a = u.exp();
            if a > 0.25 * s {
                let d = s - 2.0 * a;
                d - 2.0 * (d / s).atanh()
            } else {
                u - (s - a).ln() + s - 2.0 * a
            }
        };
        // dF/du = a g''(a)
        let fp = |u: f64| -> f64 {
            let a = u.exp();
            1.0 + a / (s - a) - 2.0 * a
        };

        // Bracket: g' < 0 well below the root, > 0 just under s/2. The
        // midpoint s/2 is itself a critical point (the local max between
        // the wells), so acceptance additionally demands g'' > 0 — true
        // only at the well — and the initial guess must keep clear of hi:
        // for s >= 2.8 the tail guess ln(s) + 2 - s sits below ln(s/2) by
        // at least s - 2 - ln 2 > 0.1, and below 2.8 the collapse
        // asymptotics are used instead.
        let delta = 1e-12f64.min((s - 2.0) * (s - 2.0));
        let mut lo = s.ln() - s - 5.0;
        let mut hi = (0.5 * s - delta).ln();
        let mut u = if s < 2.8 {
            // leading-order well offset: s/2 - alpha ~ s sqrt(3(s-2)/8)
            let t = s * (3.0 * (s - 2.0) / 8.0).sqrt();
            let a0 = (0.5 * s - t).max(0.05 * s);
            a0.ln().clamp(lo, hi)
        } else {
            (s.ln() + 2.0 - s).max(lo)
        };

        for _ in 0..200 {
            let fu = f(u);
            if fu.abs() <= self.newton_tol && fp(u) > 0.0 {
                if refine {
                    if fu < 0.0 {
                        lo = u;
                    } else {
                        hi = u;
                    }
                    u = bisect_to_exhaustion(&f, lo, hi);
                }
                let alpha = u.exp();
                return Ok(WellSolve {
                    alpha,
                    beta: s - alpha,
                    u,
                    clamped: false,
                });
            }
            if fu < 0.0 {
                lo = u;
            } else {
                hi = u;
            }
            let d = fp(u);
            let mut next = if d > 0.0 { u - fu / d } else { f64::NAN };
            if !next.is_finite() || next <= lo || next >= hi {
                next = 0.5 * (lo + hi);
            }
            if next == u {
                // interval exhausted at fp resolution
                if fp(u) <= 0.0 {
                    return Err(Error::RootFind("stagnated off the convex well"));
                }
                let alpha = u.exp();
                return Ok(WellSolve {
                    alpha,
                    beta: s - alpha,
                    u,
                    clamped: false,
                });
            }
            u = next;
        }
        Err(Error::RootFind("well position did not converge"))
    }

    fn scan_r0(&self) -> f64 {
        let mut best = f64::INFINITY;
        let mut scan = |offset: f64| {
            let s = 2.0 + offset;
            if let Ok(v) = self.tilde_f_second(s) {
                let sv = s * v;
                if sv < best {
                    best = sv;
                }
            }
        };
        // 10^4 log-spaced offsets covering (2, 10^4]
        let (lo, hi) = ((1e-6f64).ln(), (9998.0f64).ln());
        for k in 0..10_000 {
            let t = k as f64 / 9_999.0;
            scan((lo + t * (hi - lo)).exp());
        }
        // 10^3 extra points packed into (2, 2.1] where the infimum lives;
        // the 1e-6 floor keeps the scan clear of the zone where forming
        // (1 - pi) and (s - 2 pi) in f64 is itself noise-dominated
        let (lo, hi) = ((1e-6f64).ln(), (0.1f64).ln());
        for k in 0..1_000 {
            let t = k as f64 / 999.0;
            scan((lo + t * (hi - lo)).exp());
        }
        best
    }
}

fn bisect_to_exhaustion<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..90 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[inline]
fn g_prime_impl(a: f64, s: f64) -> f64 {
    // ln(a/(s-a)) == -2 atanh((s-2a)/s); the right branch keeps full
    // precision both for a near 0 and a near s/2
    if a > 0.25 * s {
        let d = s - 2.0 * a;
        d - 2.0 * (d / s).atanh()
    } else {
        a.ln() - (s - a).ln() + s - 2.0 * a
    }
}

fn check_diagonal(a: f64, s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain("diagonal parameter s must be positive"));
    }
    if !(a > 0.0) || !(a < s) {
        return Err(Error::Domain("diagonal restriction needs 0 < a < s"));
    }
    Ok(())
}

fn check_quadrant(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0) || !(b >= 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain("envelope arguments must be finite and >= 0"));
    }
    Ok(())
}
