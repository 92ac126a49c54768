//! Variant-specific latent interfaces between encoder and decoder.

use nvib_core::attention::{attn, dattn_discrete, dattn_gaussian_mixture};
use nvib_core::distributions::{location_scale, GaussianDiag};
use nvib_core::divergences::{gaussian_kl_rows, kl_one_sample};
use nvib_core::numerics::{Bound, Linear, Params};
use nvib_core::nvib::{nvib_forward_train, NvibConfig, NvibLayer, PosteriorParams, PosteriorVars, LOG_SIGMA_BOUND};
use nvib_core::{NoiseSource, Tape, Tensor, Var};

use crate::config::{Pooling, Variant};
use crate::error::{ModelError, Result};
use crate::layers::Pass;

/// A latent as plain values, for decoding outside a training pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Latent {
    /// Vectors attended with scaled dot-product attention.
    Vectors(Tensor),
    /// Weighted impulses attended with denoising attention.
    Discrete { log_weights: Tensor, vectors: Tensor },
    /// Gaussian mixture attended in closed form.
    Mixture(PosteriorParams),
}

impl Latent {
    pub fn on<'t>(&self, tape: &'t Tape) -> LatentVars<'t> {
        match self {
            Latent::Vectors(z) => LatentVars::Vectors(tape.constant(z.clone())),
            Latent::Discrete { log_weights, vectors } => LatentVars::Discrete {
                log_weights: tape.constant(log_weights.clone()),
                vectors: tape.constant(vectors.clone()),
            },
            Latent::Mixture(post) => LatentVars::Mixture(post.constants(tape)),
        }
    }

    /// Number of attended entries, masked ones included.
    pub fn len(&self) -> usize {
        match self {
            Latent::Vectors(z) => z.rows(),
            Latent::Discrete { vectors, .. } => vectors.rows(),
            Latent::Mixture(post) => post.components(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reorders the entries; `perm[i]` is the source row of entry `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Latent> {
        if perm.len() != self.len() {
            return Err(ModelError::Input("permutation length differs from latent size".into()));
        }
        let pick_cols = |t: &Tensor| t.transpose().select_rows(perm).transpose();
        Ok(match self {
            Latent::Vectors(z) => Latent::Vectors(z.select_rows(perm)),
            Latent::Discrete { log_weights, vectors } => {
                Latent::Discrete { log_weights: pick_cols(log_weights), vectors: vectors.select_rows(perm) }
            }
            Latent::Mixture(post) => Latent::Mixture(PosteriorParams::new(
                post.alphas().select_rows(perm),
                post.mus().select_rows(perm),
                post.log_sigmas().select_rows(perm),
            )?),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LatentVars<'t> {
    Vectors(Var<'t>),
    Discrete { log_weights: Var<'t>, vectors: Var<'t> },
    Mixture(PosteriorVars<'t>),
}

impl<'t> LatentVars<'t> {
    pub fn attend(&self, u: Var<'t>, d: usize) -> Result<Var<'t>> {
        Ok(match self {
            LatentVars::Vectors(z) => attn(u, *z, d)?,
            LatentVars::Discrete { log_weights, vectors } => dattn_discrete(u, *log_weights, *vectors, d)?,
            LatentVars::Mixture(post) => dattn_gaussian_mixture(u, post, d)?,
        })
    }

    pub fn value(&self) -> Result<Latent> {
        Ok(match self {
            LatentVars::Vectors(z) => Latent::Vectors(z.value()),
            LatentVars::Discrete { log_weights, vectors } => {
                Latent::Discrete { log_weights: log_weights.value(), vectors: vectors.value() }
            }
            LatentVars::Mixture(post) => Latent::Mixture(post.value()?),
        })
    }
}

/// Evenly spaced states kept by a stride-`s` mask: position `i` is dropped
/// when `⌊(i+1)s⌋ > ⌊is⌋`, so `s = 0.5` drops every second state.
pub fn stride_indices(n: usize, s: f64) -> Vec<usize> {
    (0..n).filter(|&i| ((i + 1) as f64 * s).floor() <= (i as f64 * s).floor()).collect()
}

/// Which encoder states feed a Gaussian VIB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    All,
    Pool(Pooling),
    Stride(f64),
}

impl Selection {
    fn apply<'t>(&self, states: Var<'t>) -> Var<'t> {
        match *self {
            Selection::All => states,
            Selection::Pool(Pooling::Mean) => states.sum_rows().scale(1.0 / states.rows() as f64),
            Selection::Pool(Pooling::Max) => states.column_max(),
            Selection::Pool(Pooling::Cls) => states.row(0),
            Selection::Stride(s) => states.select_rows(&stride_indices(states.rows(), s)),
        }
    }

    /// Number of latent vectors for `n` encoder states.
    pub fn count(&self, n: usize) -> usize {
        match *self {
            Selection::All => n,
            Selection::Pool(_) => 1,
            Selection::Stride(s) => stride_indices(n, s).len(),
        }
    }
}

/// Latent head of a model variant.
#[derive(Clone, Debug)]
pub enum Head {
    Identity,
    Gaussian { mu: Linear, log_sigma: Linear, select: Selection },
    Nvib(NvibLayer),
}

/// Latent of one sentence with its KL terms.
pub struct HeadOutput<'t> {
    pub latent: LatentVars<'t>,
    pub l_d: Var<'t>,
    pub l_g: Var<'t>,
    /// Posterior of the NVAE head, for retained-proportion statistics.
    pub posterior: Option<PosteriorVars<'t>>,
}

impl Head {
    pub fn new(
        params: &mut Params,
        variant: Variant,
        dim: usize,
        nvib: NvibConfig,
        alpha_init: f64,
        noise: &mut NoiseSource,
    ) -> Self {
        let gaussian = |params: &mut Params, select, noise: &mut NoiseSource| {
            let mu = Linear::new(params, "latent.mu", dim, dim, noise);
            let small = 0.1 / (dim as f64).sqrt();
            let log_sigma = Linear::with_init(
                params,
                "latent.log_sigma",
                noise.normal_tensor(dim, dim).scale(small),
                Tensor::zeros(1, dim),
            );
            Head::Gaussian { mu, log_sigma, select }
        };
        match variant {
            Variant::T => Head::Identity,
            Variant::Vt => gaussian(params, Selection::All, noise),
            Variant::Vtp(p) => gaussian(params, Selection::Pool(p), noise),
            Variant::Vts(s) => gaussian(params, Selection::Stride(s), noise),
            Variant::Nvae => Head::Nvib(NvibLayer::new(params, "nvib", dim, dim, nvib, alpha_init, noise)),
        }
    }

    pub fn apply<'t>(
        &self,
        bound: &Bound<'t>,
        states: Var<'t>,
        pass: &mut Pass<'_>,
    ) -> Result<HeadOutput<'t>> {
        let tape = states.tape();
        let zero = || tape.scalar(0.0);
        match self {
            Head::Identity => {
                Ok(HeadOutput { latent: LatentVars::Vectors(states), l_d: zero(), l_g: zero(), posterior: None })
            }
            Head::Gaussian { mu, log_sigma, select } => {
                let x = select.apply(states);
                let m = mu.apply(bound, x);
                let ls = log_sigma.apply(bound, x).clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND);
                let z = match pass.noise() {
                    Some(noise) => location_scale(m, ls.exp(), &noise.normal_tensor(m.rows(), m.cols())),
                    None => m,
                };
                let l_g = gaussian_kl_rows(m, ls, &GaussianDiag::standard(m.cols())).sum();
                Ok(HeadOutput { latent: LatentVars::Vectors(z), l_d: zero(), l_g, posterior: None })
            }
            Head::Nvib(layer) => {
                let post = layer.project(bound, states);
                let n = states.rows();
                match pass.noise() {
                    Some(noise) => {
                        let s = nvib_forward_train(&post, &layer.config, noise)?;
                        Ok(HeadOutput {
                            latent: LatentVars::Discrete { log_weights: s.log_weights, vectors: s.vectors },
                            l_d: s.kl.l_d,
                            l_g: s.kl.l_g,
                            posterior: Some(post),
                        })
                    }
                    None => {
                        let live = post.live().ok_or_else(|| ModelError::Input("posterior fully masked".into()))?;
                        let kl = kl_one_sample(
                            &live,
                            layer.config.target_alpha0(n),
                            &GaussianDiag::standard(layer.dim),
                        )?;
                        Ok(HeadOutput {
                            latent: LatentVars::Mixture(post),
                            l_d: kl.l_d,
                            l_g: kl.l_g,
                            posterior: Some(post),
                        })
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_half_keeps_every_second() {
        assert_eq!(stride_indices(5, 0.5), vec![0, 2, 4]);
        assert_eq!(stride_indices(6, 0.5), vec![0, 2, 4]);
        for n in 1..30 {
            assert_eq!(stride_indices(n, 0.5).len(), n.div_ceil(2));
        }
    }

    #[test]
    fn stride_quarter_drops_every_fourth() {
        assert_eq!(stride_indices(9, 0.25), vec![0, 1, 2, 4, 5, 6, 8]);
    }

    #[test]
    fn stride_is_evenly_spaced() {
        for n in 2..40 {
            let idx = stride_indices(n, 0.5);
            assert!(idx.windows(2).all(|w| w[1] - w[0] == 2));
        }
    }

    #[test]
    fn permuting_discrete_latent_moves_weights_with_vectors() {
        let l = Latent::Discrete {
            log_weights: Tensor::row_vector(vec![-1.0, -2.0, -3.0]),
            vectors: Tensor::from_vec(3, 1, vec![10.0, 20.0, 30.0]),
        };
        let Latent::Discrete { log_weights, vectors } = l.permuted(&[2, 0, 1]).unwrap() else { unreachable!() };
        assert_eq!(log_weights.data(), &[-3.0, -1.0, -2.0]);
        assert_eq!(vectors.data(), &[30.0, 10.0, 20.0]);
    }
}
