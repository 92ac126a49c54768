//! Closed-form KL divergences between a posterior Dirichlet process and the
//! (conditional) prior.
//!
//! The three DP divergences share the split into a weight term `L_D` and a
//! vector term `L_G`. They are written over tape variables so training can
//! differentiate them; [`kl_value`] evaluates one on a scratch tape.

use crate::distributions::GaussianDiag;
use crate::error::{dim_err, Error, Result};
use crate::numerics::special::{digamma_unchecked, log_gamma_unchecked};
use crate::numerics::{Tape, Tensor, Var};
use crate::nvib::{PosteriorParams, PosteriorVars};

/// Prior Dirichlet process and its per-token conditional pseudo-count.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub alpha0_p: f64,
    pub base: GaussianDiag,
    pub delta_p: f64,
}

impl PriorSpec {
    pub fn new(alpha0_p: f64, base: GaussianDiag, delta_p: f64) -> Result<Self> {
        if !(alpha0_p > 0.0 && alpha0_p.is_finite()) {
            return Err(Error::Domain(format!("prior concentration must be positive, got {alpha0_p}")));
        }
        if !(delta_p > 0.0 && delta_p.is_finite()) {
            return Err(Error::Domain(format!("per-token pseudo-count must be positive, got {delta_p}")));
        }
        Ok(PriorSpec { alpha0_p, base, delta_p })
    }

    /// `α₀ᵖ = 1`, standard normal base, `Δ = 1`.
    pub fn standard(dim: usize) -> Self {
        PriorSpec { alpha0_p: 1.0, base: GaussianDiag::standard(dim), delta_p: 1.0 }
    }
}

/// `α₀ᵖ + n Δ`.
pub fn conditional_prior(prior: &PriorSpec, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Domain("conditional prior needs at least one token".into()));
    }
    Ok(prior.alpha0_p + n as f64 * prior.delta_p)
}

/// Regulariser terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KLBreakdown {
    pub l_d: f64,
    pub l_g: f64,
    pub weighted: f64,
}

impl KLBreakdown {
    pub fn new(l_d: f64, l_g: f64, lambda_d: f64, lambda_g: f64) -> Self {
        KLBreakdown { l_d, l_g, weighted: lambda_d * l_d + lambda_g * l_g }
    }
}

/// `L_D` and `L_G` as `1x1` tape variables.
#[derive(Clone, Copy, Debug)]
pub struct KlTerms<'t> {
    pub l_d: Var<'t>,
    pub l_g: Var<'t>,
}

impl<'t> KlTerms<'t> {
    pub fn weighted(&self, lambda_d: f64, lambda_g: f64) -> Var<'t> {
        self.l_d.scale(lambda_d) + self.l_g.scale(lambda_g)
    }

    pub fn breakdown(&self, lambda_d: f64, lambda_g: f64) -> KLBreakdown {
        KLBreakdown::new(self.l_d.item(), self.l_g.item(), lambda_d, lambda_g)
    }
}

/// `½ Σ_h ((μ-μᵖ)²/σᵖ² + σ²/σᵖ² - 1 - ln(σ²/σᵖ²))`.
pub fn kl_gaussian_diag(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64> {
    if q.dim() != p.dim() {
        return dim_err(format!("KL between {}-dim and {}-dim Gaussians", q.dim(), p.dim()));
    }
    let mut s = 0.0;
    for h in 0..q.dim() {
        let r = (q.sigma()[h] / p.sigma()[h]).powi(2);
        let dm = (q.mu()[h] - p.mu()[h]) / p.sigma()[h];
        s += dm * dm + r - 1.0 - r.ln();
    }
    Ok(0.5 * s)
}

/// KL between two Dirichlet distributions.
pub fn kl_dirichlet(alpha_q: &[f64], alpha_p: &[f64]) -> Result<f64> {
    if alpha_q.len() != alpha_p.len() {
        return dim_err(format!("{} vs {} Dirichlet categories", alpha_q.len(), alpha_p.len()));
    }
    if alpha_q.is_empty() || alpha_q.iter().chain(alpha_p).any(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(Error::Domain("Dirichlet parameters must be positive".into()));
    }
    let q0: f64 = alpha_q.iter().sum();
    let p0: f64 = alpha_p.iter().sum();
    let psi_q0 = digamma_unchecked(q0);
    let mut kl = log_gamma_unchecked(q0) - log_gamma_unchecked(p0);
    for (&q, &p) in alpha_q.iter().zip(alpha_p) {
        kl += -log_gamma_unchecked(q) + log_gamma_unchecked(p) + (q - p) * (digamma_unchecked(q) - psi_q0);
    }
    Ok(kl)
}

/// Per-component Gaussian KL against the prior base, as a `kx1` column.
pub fn gaussian_kl_rows<'t>(mus: Var<'t>, log_sigmas: Var<'t>, base: &GaussianDiag) -> Var<'t> {
    let tape = mus.tape();
    assert_eq!(mus.cols(), base.dim(), "posterior and prior dimensions");
    let p_mu = tape.constant(Tensor::row_vector(base.mu().to_vec()));
    let p_prec = tape.constant(Tensor::row_vector(base.sigma().iter().map(|s| 1.0 / (s * s)).collect()));
    let p_log = tape.constant(Tensor::row_vector(base.sigma().iter().map(|s| s.ln()).collect()));
    let var = log_sigmas.scale(2.0).exp();
    let diff = mus.add_row(-p_mu);
    let terms = (diff.square() + var).mul_row(p_prec) - log_sigmas.add_row(-p_log).scale(2.0);
    terms.offset(-1.0).sum_cols().scale(0.5)
}

struct Live<'t> {
    alphas: Var<'t>,
    mus: Var<'t>,
    log_sigmas: Var<'t>,
    rows: Vec<usize>,
}

/// Drops zero pseudo-count components.
fn live<'t>(post: &PosteriorVars<'t>) -> Result<Live<'t>> {
    let rows: Vec<usize> = post.alphas.with_value(|a| (0..a.rows()).filter(|&i| a.get(i, 0) > 0.0).collect());
    if rows.is_empty() {
        return Err(Error::Domain("posterior has no component with positive pseudo-count".into()));
    }
    Ok(Live {
        alphas: post.alphas.select_rows(&rows),
        mus: post.mus.select_rows(&rows),
        log_sigmas: post.log_sigmas.select_rows(&rows),
        rows,
    })
}

fn check_prior_alpha(alpha0_p: f64) -> Result<()> {
    if alpha0_p > 0.0 && alpha0_p.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("prior concentration must be positive, got {alpha0_p}")))
    }
}

/// DP divergence with known per-component sample counts `κᵢ`. The prior
/// weights are `αᵢ α₀ᵖ / α₀^q` and every prior component is the base.
pub fn kl_bfdp_given_kappa<'t>(
    post: &PosteriorVars<'t>,
    prior_alpha0: f64,
    kappas: &[usize],
    base: &GaussianDiag,
) -> Result<KlTerms<'t>> {
    check_prior_alpha(prior_alpha0)?;
    if kappas.len() != post.alphas.rows() {
        return dim_err(format!("{} kappas for {} components", kappas.len(), post.alphas.rows()));
    }
    if kappas.contains(&0) {
        return Err(Error::Domain("every kappa must be at least 1".into()));
    }
    let live = live(post)?;
    let tape = live.alphas.tape();
    let kappa = tape.constant(Tensor::col_vector(live.rows.iter().map(|&i| kappas[i] as f64).collect()));
    let inv_kappa = tape.constant(Tensor::col_vector(live.rows.iter().map(|&i| 1.0 / kappas[i] as f64).collect()));
    let a = live.alphas;
    let a0 = a.sum();
    let inv_a0 = a0.recip();
    let a_over_k = a * inv_kappa;
    // (α₀^q - α₀ᵖ)(-ψ(α₀^q) + Σ αᵢ/α₀^q ψ(αᵢ/κᵢ))
    let mixed = (a * a_over_k.digamma()).sum().mul_scalar_var(inv_a0) - a0.digamma();
    let cross = a0.offset(-prior_alpha0) * mixed;
    let prior_shape = a_over_k.mul_scalar_var(inv_a0).scale(prior_alpha0);
    let per = (prior_shape.log_gamma() - a_over_k.log_gamma()) * kappa;
    let l_d = a0.log_gamma().offset(-log_gamma_unchecked(prior_alpha0)) + cross + per.sum();
    let l_g = (gaussian_kl_rows(live.mus, live.log_sigmas, base) * kappa).sum();
    Ok(KlTerms { l_d, l_g })
}

/// DP divergence with `κᵢ` replaced by its expectation `κ₀ αᵢ/α₀^q`.
pub fn kl_bfdp_expected_kappa<'t>(
    post: &PosteriorVars<'t>,
    prior_alpha0: f64,
    kappa0: f64,
    base: &GaussianDiag,
) -> Result<KlTerms<'t>> {
    check_prior_alpha(prior_alpha0)?;
    if !(kappa0 >= 1.0 && kappa0.is_finite()) {
        return Err(Error::Domain(format!("kappa0 must be at least 1, got {kappa0}")));
    }
    let live = live(post)?;
    let a = live.alphas;
    let a0 = a.sum();
    let a0_k = a0.scale(1.0 / kappa0);
    let cross = a0.offset(-prior_alpha0) * (a0_k.digamma() - a0.digamma());
    let gamma_gap = a0_k.log_gamma().scale(-1.0).offset(log_gamma_unchecked(prior_alpha0 / kappa0));
    let l_d = a0.log_gamma().offset(-log_gamma_unchecked(prior_alpha0)) + cross + gamma_gap.scale(kappa0);
    let per = gaussian_kl_rows(live.mus, live.log_sigmas, base) * a;
    let l_g = per.sum().mul_scalar_var(a0.recip()).scale(kappa0);
    Ok(KlTerms { l_d, l_g })
}

/// DP divergence for one sample per component (`κᵢ = 1`), the training
/// path.
pub fn kl_one_sample<'t>(post: &PosteriorVars<'t>, prior_alpha0: f64, base: &GaussianDiag) -> Result<KlTerms<'t>> {
    check_prior_alpha(prior_alpha0)?;
    let live = live(post)?;
    let a = live.alphas;
    let a0 = a.sum();
    let ratio = a.mul_scalar_var(a0.recip());
    // αᵢ (1 - α₀ᵖ/α₀^q)(ψ(αᵢ) - ψ(α₀^q))
    let shrink = a0.recip().scale(-prior_alpha0).offset(1.0);
    let spread = a.digamma().add_scalar_var(-a0.digamma()) * a;
    let per = ratio.scale(prior_alpha0).log_gamma() - a.log_gamma() + spread.mul_scalar_var(shrink);
    let l_d = a0.log_gamma().offset(-log_gamma_unchecked(prior_alpha0)) + per.sum();
    let l_g = gaussian_kl_rows(live.mus, live.log_sigmas, base).sum();
    Ok(KlTerms { l_d, l_g })
}

/// Evaluates a tape-level divergence on plain values.
pub fn kl_value<F>(post: &PosteriorParams, f: F) -> Result<(f64, f64)>
where
    F: for<'t> FnOnce(&PosteriorVars<'t>) -> Result<KlTerms<'t>>,
{
    let tape = Tape::new();
    let vars = post.constants(&tape);
    let terms = f(&vars)?;
    Ok((terms.l_d.item(), terms.l_g.item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn post(alphas: &[f64], d: usize) -> PosteriorParams {
        let k = alphas.len();
        PosteriorParams::new(Tensor::col_vector(alphas.to_vec()), Tensor::zeros(k, d), Tensor::zeros(k, d)).unwrap()
    }

    #[test]
    fn conditional_prior_examples() {
        let base = GaussianDiag::standard(2);
        let p = PriorSpec::new(1.0, base.clone(), 1.0).unwrap();
        assert_eq!(conditional_prior(&p, 5).unwrap(), 6.0);
        let p = PriorSpec::new(1.0, base.clone(), 0.5).unwrap();
        assert_eq!(conditional_prior(&p, 1).unwrap(), 1.5);
        let p = PriorSpec::new(1.0, base, 1e-300).unwrap();
        assert_eq!(conditional_prior(&p, 3).unwrap(), 1.0);
        assert!(conditional_prior(&p, 0).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let p = GaussianDiag::standard(1);
        assert_eq!(kl_gaussian_diag(&p, &p).unwrap(), 0.0);
        let q = GaussianDiag::new(vec![1.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(kl_gaussian_diag(&q, &p).unwrap(), 0.5, epsilon = 1e-15);
        assert!(kl_gaussian_diag(&q, &GaussianDiag::standard(2)).is_err());
    }

    #[test]
    fn dirichlet_examples() {
        assert_eq!(kl_dirichlet(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 0.0);
        let ab = kl_dirichlet(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        let ba = kl_dirichlet(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!(ab > 0.0 && ba > 0.0);
        assert!((ab - ba).abs() > 0.05);
        assert!(kl_dirichlet(&[1.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn one_sample_examples() {
        let base = GaussianDiag::standard(3);
        let (ld, lg) = kl_value(&post(&[1.0], 3), |p| kl_one_sample(p, 1.0, &base)).unwrap();
        assert_abs_diff_eq!(ld, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lg, 0.0, epsilon = 1e-14);
        let (ld, lg) = kl_value(&post(&[1.0, 1.0], 3), |p| kl_one_sample(p, 1.0, &base)).unwrap();
        assert_abs_diff_eq!(ld, std::f64::consts::PI.ln() - 1.0, epsilon = 1e-13);
        assert_eq!(lg, 0.0);
    }

    #[test]
    fn masked_components_are_dropped() {
        let base = GaussianDiag::standard(2);
        let a = kl_value(&post(&[0.0, 1.5, 0.0, 2.0], 2), |p| kl_one_sample(p, 1.0, &base)).unwrap();
        let b = kl_value(&post(&[1.5, 2.0], 2), |p| kl_one_sample(p, 1.0, &base)).unwrap();
        assert_eq!(a, b);
        let tape = Tape::new();
        let masked = PosteriorVars {
            alphas: tape.constant(Tensor::zeros(2, 1)),
            mus: tape.constant(Tensor::zeros(2, 2)),
            log_sigmas: tape.constant(Tensor::zeros(2, 2)),
        };
        assert!(matches!(kl_one_sample(&masked, 1.0, &base), Err(Error::Domain(_))));
    }

    #[test]
    fn given_kappa_prior_replica_is_zero() {
        let base = GaussianDiag::standard(2);
        for kappa in [1, 4, 9] {
            let (ld, lg) = kl_value(&post(&[2.5], 2), |p| kl_bfdp_given_kappa(p, 2.5, &[kappa], &base)).unwrap();
            assert_abs_diff_eq!(ld, 0.0, epsilon = 1e-13);
            assert_abs_diff_eq!(lg, 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn expected_kappa_zero_at_matching_mass() {
        let base = GaussianDiag::standard(2);
        for kappa0 in [1.0, 3.0, 17.0] {
            let (ld, _) =
                kl_value(&post(&[0.5, 1.25, 2.25], 2), |p| kl_bfdp_expected_kappa(p, 4.0, kappa0, &base)).unwrap();
            assert_abs_diff_eq!(ld, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn expected_kappa_matches_given_kappa_at_integer_expectations() {
        // α = (1, 2), κ₀ = 6 gives κ = (2, 4).
        let base = GaussianDiag::standard(2);
        let p = PosteriorParams::new(
            Tensor::col_vector(vec![1.0, 2.0]),
            Tensor::from_vec(2, 2, vec![0.3, -0.2, 0.0, 0.0]),
            Tensor::from_vec(2, 2, vec![-0.4, 0.1, 0.0, 0.0]),
        )
        .unwrap();
        let a = kl_value(&p, |v| kl_bfdp_expected_kappa(v, 1.0, 6.0, &base)).unwrap();
        let b = kl_value(&p, |v| kl_bfdp_given_kappa(v, 1.0, &[2, 4], &base)).unwrap();
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-12);
    }
}
