//! Reparameterised samplers and the bounded factorised Dirichlet process.
//!
//! Gamma variables are produced by one of two deterministic transforms of
//! pre-drawn noise, switching at [`GAMMA_SWITCH`]. Dirichlet weights are
//! formed in log space so that very small pseudo-counts never underflow.

use rand_distr::{Distribution, Gamma};

use crate::error::{dim_err, Error, Result};
use crate::numerics::special::log_gamma_unchecked;
use crate::numerics::{NoiseSource, Tensor, Var};

/// Below this shape the inverse-CDF transform is used, at or above it the
/// Gaussian one.
pub const GAMMA_SWITCH: f64 = 0.6363;

/// Lower truncation of the Gaussian Gamma approximation.
pub const GAMMA_FLOOR: f64 = 1e-8;

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return dim_err(format!("mean has {} entries, sigma {}", mu.len(), sigma.len()));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain("Gaussian mean must be finite".into()));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain("Gaussian scales must be positive and finite".into()));
        }
        Ok(GaussianDiag { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianDiag { mu: vec![0.0; dim], sigma: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// `μ + σ ⊙ ε`.
pub fn sample_gaussian(g: &GaussianDiag, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return dim_err(format!("noise has {} entries for a {}-dim Gaussian", eps.len(), g.dim()));
    }
    Ok(g.mu.iter().zip(&g.sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
}

/// Differentiable location-scale draw; `eps` is held fixed.
pub fn location_scale<'t>(mu: Var<'t>, sigma: Var<'t>, eps: &Tensor) -> Var<'t> {
    let eps = mu.tape().constant(eps.clone());
    mu + sigma * eps
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("Gamma shape must be positive and finite, got {alpha}")))
    }
}

/// `(u α Γ(α))^{1/α}`, evaluated in log space.
pub fn gamma_inverse_cdf_approx(alpha: f64, u: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("uniform draw must lie in (0, 1), got {u}")));
    }
    Ok(((u.ln() + alpha.ln() + log_gamma_unchecked(alpha)) / alpha).exp())
}

/// `max(α + √α ε, GAMMA_FLOOR)`.
pub fn gamma_gaussian_approx(alpha: f64, eps: f64) -> f64 {
    (alpha + alpha.sqrt() * eps).max(GAMMA_FLOOR)
}

/// One uniform and one standard-normal value; each Gamma draw consumes both
/// so the noise layout does not depend on which branch fires.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaDraw {
    pub u: f64,
    pub eps: f64,
}

impl GammaDraw {
    pub fn draw(noise: &mut NoiseSource) -> Self {
        let u = noise.uniform();
        let eps = noise.normal();
        GammaDraw { u, eps }
    }
}

fn log_gamma_approx(alpha: f64, draw: GammaDraw) -> f64 {
    if alpha < GAMMA_SWITCH {
        (draw.u.ln() + alpha.ln() + log_gamma_unchecked(alpha)) / alpha
    } else {
        gamma_gaussian_approx(alpha, draw.eps).ln()
    }
}

/// Approximate `Gamma(α, 1)` draw.
pub fn sample_gamma(alpha: f64, draw: GammaDraw) -> Result<f64> {
    check_alpha(alpha)?;
    if alpha < GAMMA_SWITCH {
        gamma_inverse_cdf_approx(alpha, draw.u)
    } else {
        Ok(gamma_gaussian_approx(alpha, draw.eps))
    }
}

/// Pre-drawn noise for a tensor of Gamma variables.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaNoise {
    pub u: Tensor,
    pub eps: Tensor,
}

impl GammaNoise {
    pub fn draw(noise: &mut NoiseSource, rows: usize, cols: usize) -> Self {
        let draws: Vec<GammaDraw> = (0..rows * cols).map(|_| GammaDraw::draw(noise)).collect();
        GammaNoise {
            u: Tensor::from_vec(rows, cols, draws.iter().map(|d| d.u).collect()),
            eps: Tensor::from_vec(rows, cols, draws.iter().map(|d| d.eps).collect()),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.u.shape()
    }
}

/// Differentiable log of an approximate Gamma draw, element-wise over
/// `alpha`. Both branches are evaluated and blended with a constant mask.
pub fn log_gamma_sample<'t>(alpha: Var<'t>, noise: &GammaNoise) -> Var<'t> {
    assert_eq!(alpha.shape(), noise.shape(), "gamma noise shape");
    let tape = alpha.tape();
    let mask = alpha.with_value(|a| a.map(|x| if x < GAMMA_SWITCH { 1.0 } else { 0.0 }));
    let inv_mask = mask.map(|m| 1.0 - m);
    let ln_u = tape.constant(noise.u.map(f64::ln));
    let inverse = (ln_u + alpha.ln() + alpha.log_gamma()) / alpha;
    let eps = tape.constant(noise.eps.clone());
    let gaussian = (alpha + alpha.sqrt() * eps).floor_at(GAMMA_FLOOR).ln();
    inverse * tape.constant(mask) + gaussian * tape.constant(inv_mask)
}

/// Differentiable log Dirichlet weights for a `1xk` row of pseudo-counts.
pub fn log_dirichlet_sample<'t>(alpha: Var<'t>, noise: &GammaNoise) -> Var<'t> {
    assert_eq!(alpha.rows(), 1, "Dirichlet parameters must be a row");
    log_gamma_sample(alpha, noise).log_softmax_rows()
}

fn normalise_log(log_g: &[f64]) -> Vec<f64> {
    let m = log_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log_g.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Dirichlet draw `γᵢ / Σγ` from approximate Gamma variables.
pub fn sample_dirichlet(alphas: &[f64], draws: &[GammaDraw]) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(Error::Domain("Dirichlet needs at least one category".into()));
    }
    if alphas.len() != draws.len() {
        return dim_err(format!("{} pseudo-counts, {} noise draws", alphas.len(), draws.len()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let log_g: Vec<f64> = alphas.iter().zip(draws).map(|(&a, &d)| log_gamma_approx(a, d)).collect();
    Ok(normalise_log(&log_g))
}

/// How Gamma variables are produced inside [`sample_bfdp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaSampler {
    /// The differentiable approximations used in training.
    Reparameterized,
    /// Exact draws, for statistical oracles.
    Exact,
}

impl GammaSampler {
    /// Log of one `Gamma(α, 1)` draw, consuming noise from `noise`.
    pub fn log_draw(self, alpha: f64, noise: &mut NoiseSource) -> f64 {
        match self {
            GammaSampler::Reparameterized => log_gamma_approx(alpha, GammaDraw::draw(noise)),
            GammaSampler::Exact => {
                // Gamma(α) = Gamma(α + 1) U^{1/α} keeps small shapes off zero.
                let g = Gamma::new(alpha + 1.0, 1.0).expect("valid shape").sample(noise.rng());
                g.ln() + noise.uniform().ln() / alpha
            }
        }
    }

    /// Dirichlet weights from this sampler's Gamma draws.
    pub fn dirichlet(self, alphas: &[f64], noise: &mut NoiseSource) -> Result<Vec<f64>> {
        if alphas.is_empty() {
            return Err(Error::Domain("Dirichlet needs at least one category".into()));
        }
        for &a in alphas {
            check_alpha(a)?;
        }
        let log_g: Vec<f64> = alphas.iter().map(|&a| self.log_draw(a, noise)).collect();
        Ok(normalise_log(&log_g))
    }
}

/// Bounded factorised DP: components with pseudo-counts and per-component
/// sample counts κᵢ.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedDpSpec {
    components: Vec<(GaussianDiag, f64)>,
    kappas: Vec<usize>,
}

impl BoundedDpSpec {
    pub fn new(components: Vec<(GaussianDiag, f64)>, kappas: Vec<usize>) -> Result<Self> {
        if components.len() != kappas.len() {
            return dim_err(format!("{} components but {} kappas", components.len(), kappas.len()));
        }
        let dim = components.first().map_or(0, |(g, _)| g.dim());
        if components.iter().any(|(g, _)| g.dim() != dim) {
            return dim_err("components differ in dimension");
        }
        if components.iter().any(|(_, a)| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Domain("pseudo-counts must be finite and non-negative".into()));
        }
        if !components.iter().any(|(_, a)| *a > 0.0) {
            return Err(Error::Domain("at least one pseudo-count must be positive".into()));
        }
        if kappas.contains(&0) {
            return Err(Error::Domain("every kappa must be at least 1".into()));
        }
        Ok(BoundedDpSpec { components, kappas })
    }

    pub fn components(&self) -> &[(GaussianDiag, f64)] {
        &self.components
    }

    pub fn kappas(&self) -> &[usize] {
        &self.kappas
    }

    pub fn dim(&self) -> usize {
        self.components[0].0.dim()
    }
}

/// One draw `F = Σ ρᵢ π′ᵢⱼ δ(zᵢⱼ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub weights: Vec<f64>,
    pub vectors: Tensor,
    pub component_of: Vec<usize>,
    /// Total weight `ρᵢ` of every component, zero for dropped ones.
    pub totals: Vec<f64>,
}

/// Samples the bounded factorised DP. Components with zero pseudo-count
/// contribute no rows.
pub fn sample_bfdp(spec: &BoundedDpSpec, noise: &mut NoiseSource, sampler: GammaSampler) -> Result<MixtureSample> {
    let live: Vec<usize> = (0..spec.components.len()).filter(|&i| spec.components[i].1 > 0.0).collect();
    let log_rho: Vec<f64> =
        live.iter().map(|&i| sampler.log_draw(spec.components[i].1, noise)).collect();
    let rho = normalise_log(&log_rho);
    let mut totals = vec![0.0; spec.components.len()];
    let mut weights = Vec::new();
    let mut rows = Vec::new();
    let mut component_of = Vec::new();
    for (&i, &r) in live.iter().zip(&rho) {
        totals[i] = r;
        let (g, alpha) = &spec.components[i];
        let kappa = spec.kappas[i];
        let inner = if kappa == 1 {
            vec![1.0]
        } else {
            let a = alpha / kappa as f64;
            let log_g: Vec<f64> = (0..kappa).map(|_| sampler.log_draw(a, noise)).collect();
            normalise_log(&log_g)
        };
        for w in inner {
            let eps: Vec<f64> = (0..g.dim()).map(|_| noise.normal()).collect();
            rows.extend(sample_gaussian(g, &eps)?);
            weights.push(r * w);
            component_of.push(i);
        }
    }
    let vectors = Tensor::from_vec(weights.len(), spec.dim(), rows);
    Ok(MixtureSample { weights, vectors, component_of, totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_examples() {
        let g = GaussianDiag::new(vec![2.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(sample_gaussian(&g, &[0.0, 0.0]).unwrap(), vec![2.0, -1.0]);
        let g = GaussianDiag::new(vec![0.0], vec![3.0]).unwrap();
        assert_eq!(sample_gaussian(&g, &[1.0]).unwrap(), vec![3.0]);
        assert!(matches!(sample_gaussian(&g, &[1.0, 2.0]), Err(Error::Dimension(_))));
        assert!(GaussianDiag::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn inverse_cdf_examples() {
        assert_abs_diff_eq!(gamma_inverse_cdf_approx(1.0, 0.5).unwrap(), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(gamma_inverse_cdf_approx(1.0, 0.9).unwrap(), 0.9, epsilon = 1e-14);
        assert_abs_diff_eq!(gamma_inverse_cdf_approx(0.5, 0.25).unwrap(), 0.049_087_385_212_340_52, epsilon = 1e-14);
        assert!(gamma_inverse_cdf_approx(0.0, 0.5).is_err());
        assert!(gamma_inverse_cdf_approx(1.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_approx_examples() {
        assert_eq!(gamma_gaussian_approx(4.0, 1.0), 6.0);
        assert_eq!(gamma_gaussian_approx(9.0, 0.0), 9.0);
        assert_eq!(gamma_gaussian_approx(1.0, -5.0), 1e-8);
    }

    #[test]
    fn switch_tie_uses_gaussian_branch() {
        let d = GammaDraw { u: 0.3, eps: 0.7 };
        assert_eq!(sample_gamma(GAMMA_SWITCH, d).unwrap(), gamma_gaussian_approx(GAMMA_SWITCH, 0.7));
        assert_eq!(
            sample_gamma(0.6, d).unwrap(),
            gamma_inverse_cdf_approx(0.6, 0.3).unwrap()
        );
    }

    #[test]
    fn dirichlet_examples() {
        let d = GammaDraw { u: 0.4, eps: 0.2 };
        assert_eq!(sample_dirichlet(&[3.0, 3.0], &[d, d]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(sample_dirichlet(&[0.01], &[d]).unwrap(), vec![1.0]);
        assert!(matches!(sample_dirichlet(&[1.0, 0.0], &[d, d]), Err(Error::Domain(_))));
    }

    #[test]
    fn tiny_pseudo_counts_stay_finite() {
        let mut noise = NoiseSource::new(3);
        let alphas = [1e-6, 1e-3, 5.0];
        for _ in 0..100 {
            let draws: Vec<GammaDraw> = (0..3).map(|_| GammaDraw::draw(&mut noise)).collect();
            let w = sample_dirichlet(&alphas, &draws).unwrap();
            assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tape_sampler_matches_scalar_path() {
        let mut noise = NoiseSource::new(11);
        let alphas = vec![0.05, 0.5, 0.6363, 2.0, 30.0];
        let gn = GammaNoise::draw(&mut noise, 1, alphas.len());
        let tape = Tape::new();
        let a = tape.leaf(Tensor::row_vector(alphas.clone()));
        let logw = log_dirichlet_sample(a, &gn).value();
        let draws: Vec<GammaDraw> =
            (0..alphas.len()).map(|k| GammaDraw { u: gn.u.data()[k], eps: gn.eps.data()[k] }).collect();
        let w = sample_dirichlet(&alphas, &draws).unwrap();
        for (l, w) in logw.data().iter().zip(&w) {
            assert_abs_diff_eq!(l.exp(), *w, epsilon = 1e-12);
        }
    }

    #[test]
    fn bfdp_bookkeeping() {
        let g = GaussianDiag::standard(3);
        let spec = BoundedDpSpec::new(vec![(g.clone(), 1.0), (g.clone(), 2.0)], vec![2, 3]).unwrap();
        let s = sample_bfdp(&spec, &mut NoiseSource::new(0), GammaSampler::Reparameterized).unwrap();
        assert_eq!(s.vectors.shape(), [5, 3]);
        assert_eq!(s.component_of, vec![0, 0, 1, 1, 1]);
        assert_abs_diff_eq!(s.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let single = BoundedDpSpec::new(vec![(g.clone(), 0.7)], vec![1]).unwrap();
        let s = sample_bfdp(&single, &mut NoiseSource::new(1), GammaSampler::Exact).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_eq!(s.vectors.rows(), 1);

        assert!(BoundedDpSpec::new(vec![(g.clone(), 0.0)], vec![1]).is_err());
        let masked = BoundedDpSpec::new(vec![(g.clone(), 0.0), (g, 1.0)], vec![2, 2]).unwrap();
        let s = sample_bfdp(&masked, &mut NoiseSource::new(2), GammaSampler::Reparameterized).unwrap();
        assert_eq!(s.component_of, vec![1, 1]);
        assert_eq!(s.totals[0], 0.0);
    }

    #[test]
    fn samplers_are_deterministic() {
        let g = GaussianDiag::new(vec![1.0, -1.0], vec![0.5, 2.0]).unwrap();
        let spec = BoundedDpSpec::new(vec![(g.clone(), 0.3), (g, 4.0)], vec![3, 1]).unwrap();
        for sampler in [GammaSampler::Reparameterized, GammaSampler::Exact] {
            let a = sample_bfdp(&spec, &mut NoiseSource::new(9), sampler).unwrap();
            let b = sample_bfdp(&spec, &mut NoiseSource::new(9), sampler).unwrap();
            assert_eq!(a, b);
        }
    }
}
