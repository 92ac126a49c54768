//! Error of the two Gamma approximations against the exact inverse CDF.

use nvib_core::distributions::gamma_inverse_cdf_approx;
use nvib_core::numerics::special::{gamma_inverse_cdf, normal_quantile};

use crate::error::Result;

pub const QUANTILES: usize = 1000;
const U_LO: f64 = 0.001;
const U_HI: f64 = 0.999;

fn grid() -> impl Iterator<Item = f64> {
    (0..QUANTILES).map(|i| U_LO + (U_HI - U_LO) * i as f64 / (QUANTILES - 1) as f64)
}

/// Mean absolute error of each approximation at shape `alpha`, as
/// `(inverse_cdf, gaussian)`. The Gaussian is left untruncated.
pub fn approximation_errors(alpha: f64) -> Result<(f64, f64)> {
    let (mut inv, mut gauss) = (0.0, 0.0);
    for u in grid() {
        let exact = gamma_inverse_cdf(alpha, u)?;
        inv += (gamma_inverse_cdf_approx(alpha, u)? - exact).abs();
        gauss += (alpha + alpha.sqrt() * normal_quantile(u)? - exact).abs();
    }
    Ok((inv / QUANTILES as f64, gauss / QUANTILES as f64))
}

/// Shape where the two error curves meet, by bisection on `[lo, hi]`.
pub fn crossover(lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let gap = |a: f64| approximation_errors(a).map(|(i, g)| i - g);
    let (mut lo, mut hi) = (lo, hi);
    let mut g_lo = gap(lo)?;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let g = gap(mid)?;
        if (g < 0.0) == (g_lo < 0.0) {
            lo = mid;
            g_lo = g;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Rows `(alpha, inverse_cdf_error, gaussian_error)` on a log-spaced grid.
pub fn curves(points: usize, lo: f64, hi: f64) -> Result<Vec<(f64, f64, f64)>> {
    (0..points)
        .map(|i| {
            let a = lo * (hi / lo).powf(i as f64 / (points - 1).max(1) as f64);
            approximation_errors(a).map(|(inv, g)| (a, inv, g))
        })
        .collect()
}
