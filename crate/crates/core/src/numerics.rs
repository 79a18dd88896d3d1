//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation.
///
/// Deterministic for a fixed input order and much better conditioned than a
/// naive left fold; every accumulation that ends up in a report or a ledger
/// goes through this so results are bit-stable run to run.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// log(sum(exp(x_i))) with the usual max shift. Empty input gives -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for &x in xs {
        acc += (x - m).exp();
    }
    m + acc.ln()
}

/// `x*ln(x)` extended by 0 at `x = 0`.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Midpoint cell centers for quick test grids.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + step * i as f64).collect()
}
