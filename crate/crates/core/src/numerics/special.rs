//! Special functions.
//!
//! `log_gamma`, `digamma` and `trigamma` share one scheme: shift the
//! argument above [`ASYMPTOTIC_THRESHOLD`] with the recurrence, then sum the
//! asymptotic series. The incomplete gamma, its inverse and the normal
//! quantile are only used by the offline Gamma-approximation study.

use crate::error::{Error, Result};

const ASYMPTOTIC_THRESHOLD: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_positive(x: f64, what: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} requires a positive finite argument, got {x}")))
    }
}

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive(x, "log_gamma")?;
    Ok(log_gamma_unchecked(x))
}

pub(crate) fn log_gamma_unchecked(mut x: f64) -> f64 {
    // ln Γ(x) = ln Γ(x + k) - ln(x (x+1) ... (x+k-1))
    let mut prod = 1.0;
    let mut shifted = false;
    while x < ASYMPTOTIC_THRESHOLD {
        prod *= x;
        x += 1.0;
        shifted = true;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Stirling series with Bernoulli coefficients B_2k / (2k (2k-1)).
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2
                                                * (-691.0 / 360_360.0
                                                    + inv2 * (1.0 / 156.0 - inv2 * 3617.0 / 122_400.0)))))));
    let base = (x - 0.5) * x.ln() - x + HALF_LN_2PI + series;
    if shifted {
        base - prod.ln()
    } else {
        base
    }
}

/// Digamma `ψ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive(x, "digamma")?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift += 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    x.ln() - 0.5 * inv - series - shift
}

/// Trigamma `ψ'(x)` for `x > 0`; the derivative used when back-propagating
/// through [`digamma`].
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive(x, "trigamma")?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + inv2 / 2.0
        + inv * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    series + shift
}

/// Regularised lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> Result<f64> {
    check_positive(a, "gamma_p")?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("gamma_p requires x >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x < a + 1.0 {
        Ok(gamma_series(a, x))
    } else {
        Ok(1.0 - gamma_continued_fraction(a, x))
    }
}

/// Regularised upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    check_positive(a, "gamma_q")?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("gamma_q requires x >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x < a + 1.0 {
        Ok(1.0 - gamma_series(a, x))
    } else {
        Ok(gamma_continued_fraction(a, x))
    }
}

fn gamma_prefactor(a: f64, x: f64) -> f64 {
    (a * x.ln() - x - log_gamma_unchecked(a)).exp()
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * gamma_prefactor(a, x)
}

fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    // Modified Lentz evaluation.
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * gamma_prefactor(a, x)
}

/// Exact inverse CDF of `Gamma(alpha, 1)` by bisection on [`gamma_p`].
pub fn gamma_inverse_cdf(alpha: f64, u: f64) -> Result<f64> {
    check_positive(alpha, "gamma_inverse_cdf")?;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("quantile must lie in (0,1), got {u}")));
    }
    let mut lo = 0.0_f64;
    let mut hi = alpha.max(1.0);
    while gamma_p(alpha, hi)? < u {
        lo = hi;
        hi *= 2.0;
    }
    if lo == 0.0 {
        // Tighten the lower end geometrically; small shapes put quantiles
        // many decades below one.
        let mut probe = hi;
        while probe > 1e-300 && gamma_p(alpha, probe)? >= u {
            hi = probe;
            probe *= 1e-3;
        }
        lo = probe;
    }
    for _ in 0..400 {
        let mid = if lo > 0.0 && hi / lo > 4.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        if gamma_p(alpha, mid)? < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1e-300) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Complementary error function via `erfc(x) = Q(1/2, x^2)`.
pub fn erfc(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let q = gamma_q(0.5, x * x).unwrap_or(0.0);
    if x > 0.0 {
        q
    } else {
        2.0 - q
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational initial guess refined by Halley steps
/// against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile requires p in (0,1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}
