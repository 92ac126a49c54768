//! The bottleneck layer: encoder states to Dirichlet-process posterior,
//! sampled mixtures for training, the mean mixture for evaluation, and the
//! KL regulariser.
//!
//! A posterior has one component per token followed by the prior
//! component `(α₀ᵖ, 0, 0)`, which is never masked.

use crate::attention::dattn_gaussian_mixture;
use crate::distributions::{location_scale, log_dirichlet_sample, GammaNoise, GaussianDiag};
use crate::divergences::{kl_one_sample, KlTerms, PriorSpec};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Bound, Linear, NoiseSource, Params, Tape, Tensor, Var};

/// Bound on `ln σ` everywhere in the layer.
pub const LOG_SIGMA_BOUND: f64 = 8.0;

/// Pseudo-counts (`kx1`), means and log standard deviations (`kxd`).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    alphas: Tensor,
    mus: Tensor,
    log_sigmas: Tensor,
}

impl PosteriorParams {
    pub fn new(alphas: Tensor, mus: Tensor, log_sigmas: Tensor) -> Result<Self> {
        if alphas.cols() != 1 || alphas.rows() != mus.rows() || mus.shape() != log_sigmas.shape() {
            return dim_err(format!(
                "posterior shapes {:?}, {:?}, {:?}",
                alphas.shape(),
                mus.shape(),
                log_sigmas.shape()
            ));
        }
        if !(alphas.is_finite() && mus.is_finite() && log_sigmas.is_finite()) {
            return Err(Error::Domain("posterior parameters must be finite".into()));
        }
        if alphas.data().iter().any(|&a| a < 0.0) || alphas.sum() <= 0.0 {
            return Err(Error::Domain("pseudo-counts must be non-negative with positive sum".into()));
        }
        if log_sigmas.data().iter().any(|s| s.abs() > LOG_SIGMA_BOUND) {
            return Err(Error::Domain(format!("log sigma outside [-{LOG_SIGMA_BOUND}, {LOG_SIGMA_BOUND}]")));
        }
        Ok(PosteriorParams { alphas, mus, log_sigmas })
    }

    pub fn alphas(&self) -> &Tensor {
        &self.alphas
    }

    pub fn mus(&self) -> &Tensor {
        &self.mus
    }

    pub fn log_sigmas(&self) -> &Tensor {
        &self.log_sigmas
    }

    pub fn components(&self) -> usize {
        self.alphas.rows()
    }

    pub fn dim(&self) -> usize {
        self.mus.cols()
    }

    pub fn alpha0(&self) -> f64 {
        self.alphas.sum()
    }

    /// Registers the parameters as constants.
    pub fn constants<'t>(&self, tape: &'t Tape) -> PosteriorVars<'t> {
        PosteriorVars {
            alphas: tape.constant(self.alphas.clone()),
            mus: tape.constant(self.mus.clone()),
            log_sigmas: tape.constant(self.log_sigmas.clone()),
        }
    }

    /// Registers the parameters as differentiable leaves.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> PosteriorVars<'t> {
        PosteriorVars {
            alphas: tape.leaf(self.alphas.clone()),
            mus: tape.leaf(self.mus.clone()),
            log_sigmas: tape.leaf(self.log_sigmas.clone()),
        }
    }
}

/// A posterior recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars<'t> {
    pub alphas: Var<'t>,
    pub mus: Var<'t>,
    pub log_sigmas: Var<'t>,
}

impl<'t> PosteriorVars<'t> {
    pub fn components(&self) -> usize {
        self.alphas.rows()
    }

    pub fn dim(&self) -> usize {
        self.mus.cols()
    }

    /// Indices of components with positive pseudo-count.
    pub fn live_rows(&self) -> Vec<usize> {
        self.alphas.with_value(|a| (0..a.rows()).filter(|&i| a.get(i, 0) > 0.0).collect())
    }

    /// The sub-posterior of live components, or `None` if all are masked.
    pub fn live(&self) -> Option<PosteriorVars<'t>> {
        let rows = self.live_rows();
        if rows.is_empty() {
            return None;
        }
        if rows.len() == self.components() {
            return Some(*self);
        }
        Some(PosteriorVars {
            alphas: self.alphas.select_rows(&rows),
            mus: self.mus.select_rows(&rows),
            log_sigmas: self.log_sigmas.select_rows(&rows),
        })
    }

    pub fn value(&self) -> Result<PosteriorParams> {
        PosteriorParams::new(self.alphas.value(), self.mus.value(), self.log_sigmas.value())
    }
}

/// Loss weights and prior settings of the layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NvibConfig {
    pub lambda_d_prime: f64,
    pub lambda_g_prime: f64,
    pub delta_p: f64,
    pub alpha0_p: f64,
    /// Regularise towards `α₀ᵖ + nΔ` rather than `α₀ᵖ`.
    pub conditional_prior: bool,
}

impl Default for NvibConfig {
    fn default() -> Self {
        NvibConfig { lambda_d_prime: 1.0, lambda_g_prime: 0.01, delta_p: 1.0, alpha0_p: 1.0, conditional_prior: true }
    }
}

impl NvibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d_prime >= 0.0 && self.lambda_g_prime >= 0.0) {
            return Err(Error::Domain("loss weights must be non-negative".into()));
        }
        if !(self.delta_p > 0.0 && self.alpha0_p > 0.0) {
            return Err(Error::Domain("prior pseudo-counts must be positive".into()));
        }
        Ok(())
    }

    /// `(λ_D, λ_G) = (λ′_D / n, λ′_G / (n d))`.
    pub fn lambdas(&self, n: usize, d: usize) -> (f64, f64) {
        let n = n as f64;
        (self.lambda_d_prime / n, self.lambda_g_prime / (n * d as f64))
    }

    pub fn prior(&self, d: usize) -> PriorSpec {
        PriorSpec { alpha0_p: self.alpha0_p, base: GaussianDiag::standard(d), delta_p: self.delta_p }
    }

    /// Prior concentration the KL targets for `n` tokens.
    pub fn target_alpha0(&self, n: usize) -> f64 {
        if self.conditional_prior {
            self.alpha0_p + n as f64 * self.delta_p
        } else {
            self.alpha0_p
        }
    }
}

/// Projections from encoder states to posterior parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NvibLayer {
    pub alpha: Linear,
    pub mu: Linear,
    pub log_sigma: Linear,
    pub dim: usize,
    pub config: NvibConfig,
}

impl NvibLayer {
    /// The pseudo-count projection starts with small weights and bias
    /// `alpha_bias`, so every token is retained at initialisation.
    pub fn new(
        params: &mut Params,
        name: &str,
        input_dim: usize,
        dim: usize,
        config: NvibConfig,
        alpha_bias: f64,
        noise: &mut NoiseSource,
    ) -> Self {
        let small = 0.1 / (input_dim as f64).sqrt();
        let alpha = Linear::with_init(
            params,
            &format!("{name}.alpha"),
            noise.normal_tensor(input_dim, 1).scale(small),
            Tensor::filled(1, 1, alpha_bias),
        );
        let mu = Linear::new(params, &format!("{name}.mu"), input_dim, dim, noise);
        let log_sigma = Linear::with_init(
            params,
            &format!("{name}.log_sigma"),
            noise.normal_tensor(input_dim, dim).scale(small),
            Tensor::zeros(1, dim),
        );
        NvibLayer { alpha, mu, log_sigma, dim, config }
    }

    /// Posterior for `n` encoder states, with the prior component appended.
    pub fn project<'t>(&self, bound: &Bound<'t>, states: Var<'t>) -> PosteriorVars<'t> {
        let tape = states.tape();
        let alphas = self.alpha.apply(bound, states).relu();
        let mus = self.mu.apply(bound, states);
        let log_sigmas = self.log_sigma.apply(bound, states).clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND);
        PosteriorVars {
            alphas: Var::concat_rows(&[alphas, tape.constant(Tensor::scalar(self.config.alpha0_p))]),
            mus: Var::concat_rows(&[mus, tape.constant(Tensor::zeros(1, self.dim))]),
            log_sigmas: Var::concat_rows(&[log_sigmas, tape.constant(Tensor::zeros(1, self.dim))]),
        }
    }
}

/// Sampled mixture and KL of one training pass.
#[derive(Clone, Debug)]
pub struct TrainSample<'t> {
    /// `1xk` log Dirichlet weights over live components.
    pub log_weights: Var<'t>,
    /// `kxd` location-scale draws.
    pub vectors: Var<'t>,
    /// Posterior row of every mixture entry.
    pub component_of: Vec<usize>,
    pub kl: KlTerms<'t>,
}

/// One vector per live component, Dirichlet weights over live pseudo-counts
/// and the one-sample KL against the (conditional) prior.
pub fn nvib_forward_train<'t>(
    post: &PosteriorVars<'t>,
    config: &NvibConfig,
    noise: &mut NoiseSource,
) -> Result<TrainSample<'t>> {
    let n = post.components() - 1;
    let component_of = post.live_rows();
    let live = post.live().ok_or_else(|| Error::Domain("posterior has no live component".into()))?;
    let k = component_of.len();
    let eps = noise.normal_tensor(k, post.dim());
    let gamma = GammaNoise::draw(noise, 1, k);
    let vectors = location_scale(live.mus, live.log_sigmas.exp(), &eps);
    let log_weights = log_dirichlet_sample(live.alphas.t(), &gamma);
    let kl = kl_one_sample(&live, config.target_alpha0(n.max(1)), &GaussianDiag::standard(post.dim()))?;
    Ok(TrainSample { log_weights, vectors, component_of, kl })
}

/// Evaluation-time attention over the posterior's mean mixture.
#[derive(Clone, Copy, Debug)]
pub struct MeanAttention<'t> {
    post: PosteriorVars<'t>,
    scale_dim: usize,
}

impl<'t> MeanAttention<'t> {
    pub fn attend(&self, u: Var<'t>) -> Result<Var<'t>> {
        dattn_gaussian_mixture(u, &self.post, self.scale_dim)
    }
}

pub fn nvib_forward_test<'t>(post: &PosteriorVars<'t>, scale_dim: usize) -> Result<MeanAttention<'t>> {
    let live = post.live().ok_or_else(|| Error::Contract("every mixture component is masked".into()))?;
    Ok(MeanAttention { post: live, scale_dim })
}

/// Fraction of token components with positive pseudo-count; the trailing
/// prior component is not counted.
pub fn retained_proportion(post: &PosteriorParams) -> f64 {
    let n = post.components() - 1;
    if n == 0 {
        return 0.0;
    }
    let kept = post.alphas().data()[..n].iter().filter(|&&a| a > 0.0).count();
    kept as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dattn_gaussian_mixture_value;
    use approx::assert_abs_diff_eq;

    fn posterior(alphas: Vec<f64>, d: usize) -> PosteriorParams {
        let k = alphas.len();
        PosteriorParams::new(Tensor::col_vector(alphas), Tensor::zeros(k, d), Tensor::zeros(k, d)).unwrap()
    }

    #[test]
    fn retained_proportion_examples() {
        assert_eq!(retained_proportion(&posterior(vec![0.0, 2.0, 0.0, 3.0, 1.0], 2)), 0.5);
        assert_eq!(retained_proportion(&posterior(vec![0.2, 2.0, 1.0], 2)), 1.0);
        assert_eq!(retained_proportion(&posterior(vec![0.0, 0.0, 1.0], 2)), 0.0);
    }

    #[test]
    fn projection_shapes_and_masking() {
        let mut params = Params::new();
        let mut noise = NoiseSource::new(0);
        let layer = NvibLayer::new(&mut params, "nvib", 6, 4, NvibConfig::default(), 1.0, &mut noise);
        *params.get_mut(layer.alpha.b) = Tensor::scalar(-0.3);
        *params.get_mut(layer.alpha.w) = Tensor::zeros(6, 1);
        *params.get_mut(layer.log_sigma.w) = Tensor::zeros(6, 4);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let states = tape.constant(noise.normal_tensor(3, 6));
        let post = layer.project(&bound, states);
        assert_eq!(post.components(), 4);
        let v = post.value().unwrap();
        assert_eq!(v.alphas().data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(v.log_sigmas().data().iter().all(|&s| s == 0.0));
        assert_eq!(v.mus().row(3), &[0.0; 4]);
    }

    #[test]
    fn prior_only_mixture_has_one_vector() {
        let cfg = NvibConfig::default();
        let p = posterior(vec![0.0, 0.0, 1.0], 3);
        let tape = Tape::new();
        let vars = p.constants(&tape);
        let s = nvib_forward_train(&vars, &cfg, &mut NoiseSource::new(4)).unwrap();
        assert_eq!(s.vectors.rows(), 1);
        assert_eq!(s.component_of, vec![2]);
        assert_abs_diff_eq!(s.log_weights.item(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_vanishes_for_prior_matching_posterior() {
        let cfg = NvibConfig { conditional_prior: false, ..NvibConfig::default() };
        let p = posterior(vec![0.0, 1.0], 2);
        let tape = Tape::new();
        let vars = p.constants(&tape);
        let s = nvib_forward_train(&vars, &cfg, &mut NoiseSource::new(4)).unwrap();
        assert_abs_diff_eq!(s.kl.l_d.item(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.kl.l_g.item(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn train_pass_is_deterministic() {
        let p = PosteriorParams::new(
            Tensor::col_vector(vec![0.4, 0.0, 2.0, 1.0]),
            Tensor::from_vec(4, 2, vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.0, 0.0]),
            Tensor::from_vec(4, 2, vec![-1.0, 0.5, 0.0, 0.2, 0.3, -0.3, 0.0, 0.0]),
        )
        .unwrap();
        let run = || {
            let tape = Tape::new();
            let vars = p.constants(&tape);
            let s = nvib_forward_train(&vars, &NvibConfig::default(), &mut NoiseSource::new(21)).unwrap();
            (s.log_weights.value(), s.vectors.value(), s.kl.l_d.item(), s.kl.l_g.item())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mean_attention_delegates() {
        let p = PosteriorParams::new(
            Tensor::col_vector(vec![1.5, 0.0, 1.0]),
            Tensor::from_vec(3, 2, vec![1.0, -1.0, 5.0, 5.0, 0.0, 0.0]),
            Tensor::from_vec(3, 2, vec![-0.5, 0.5, 0.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        let u = Tensor::from_vec(2, 2, vec![0.3, 0.7, -2.0, 1.0]);
        let tape = Tape::new();
        let closure = nvib_forward_test(&p.constants(&tape), 2).unwrap();
        let a = closure.attend(tape.constant(u.clone())).unwrap().value();
        let b = dattn_gaussian_mixture_value(&u, &p, 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }
}
