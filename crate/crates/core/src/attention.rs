//! Scaled dot-product attention and denoising attention.
//!
//! Every function takes a matrix of queries (one per row) and a scale
//! dimension `d`, the key/query dimension whose square root scales the dot
//! products. Mixture log-weights are normalised with one log-sum-exp per
//! query.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::nvib::{PosteriorParams, PosteriorVars};

/// Weighted set of impulses.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMixture {
    weights: Vec<f64>,
    vectors: Tensor,
}

impl DiscreteMixture {
    pub fn new(weights: Vec<f64>, vectors: Tensor) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Contract("empty mixture".into()));
        }
        if weights.len() != vectors.rows() {
            return Err(Error::Dimension(format!("{} weights for {} vectors", weights.len(), vectors.rows())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Domain("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mixture weights sum to {total}")));
        }
        Ok(DiscreteMixture { weights, vectors })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_dims(u: Var<'_>, z: Var<'_>) -> Result<()> {
    if z.rows() == 0 {
        return Err(Error::Contract("attention over an empty set".into()));
    }
    if u.cols() != z.cols() {
        return Err(Error::Dimension(format!("query width {} vs vector width {}", u.cols(), z.cols())));
    }
    Ok(())
}

/// `softmax(u Zᵀ / √d) Z`.
pub fn attn<'t>(u: Var<'t>, z: Var<'t>, d: usize) -> Result<Var<'t>> {
    check_dims(u, z)?;
    let w = u.matmul_t(z).scale(1.0 / (d as f64).sqrt()).softmax_rows();
    Ok(w.matmul(z))
}

/// Log of the impulse weights `softmax(‖zᵢ‖² / (2√d))` as a `1xn` row.
pub fn impulse_log_weights<'t>(z: Var<'t>, d: usize) -> Var<'t> {
    z.square().sum_cols().t().scale(0.5 / (d as f64).sqrt()).log_softmax_rows()
}

/// The impulse mixture whose denoising attention reproduces [`attn`].
pub fn impulse_mixture(z: &Tensor, d: usize) -> Result<DiscreteMixture> {
    if z.rows() == 0 {
        return Err(Error::Contract("impulse mixture of an empty set".into()));
    }
    let tape = Tape::new();
    let logw = impulse_log_weights(tape.constant(z.clone()), d).value();
    DiscreteMixture::new(logw.data().iter().map(|l| l.exp()).collect(), z.clone())
}

/// Denoising attention over impulses with log-weights `ln π` (a `1xk`
/// row): softmax over `ln πₖ + u·zₖ/√d - ‖zₖ‖²/(2√d)`.
pub fn dattn_discrete<'t>(u: Var<'t>, log_pi: Var<'t>, z: Var<'t>, d: usize) -> Result<Var<'t>> {
    check_dims(u, z)?;
    if log_pi.shape() != [1, z.rows()] {
        return Err(Error::Dimension(format!("log-weights shape {:?} for {} vectors", log_pi.shape(), z.rows())));
    }
    let inv_sd = 1.0 / (d as f64).sqrt();
    let bias = log_pi - z.square().sum_cols().t().scale(0.5 * inv_sd);
    let w = u.matmul_t(z).scale(inv_sd).add_row(bias).softmax_rows();
    Ok(w.matmul(z))
}

/// Gaussian-mixture denoising attention. Component `i` contributes the
/// precision-weighted interpolant `(u/√d + μᵢ/σᵢ²) / (1/√d + 1/σᵢ²)` with
/// weight proportional to `αᵢ N(u; μᵢ, diag(√d + σᵢ²))`. Components with
/// zero pseudo-count are excluded.
pub fn dattn_gaussian_mixture<'t>(u: Var<'t>, post: &PosteriorVars<'t>, d: usize) -> Result<Var<'t>> {
    let live = post
        .live()
        .ok_or_else(|| Error::Contract("every mixture component is masked".into()))?;
    check_dims(u, live.mus)?;
    let sd = (d as f64).sqrt();
    let var = live.log_sigmas.scale(2.0).exp();
    let prec = var.offset(sd).recip();
    let mp = live.mus * prec;
    let log_det = prec.scale(1.0 / (2.0 * std::f64::consts::PI)).ln().sum_cols().scale(0.5);
    let quad_mu = (live.mus * mp).sum_cols().scale(-0.5);
    let bias = (live.alphas.ln() + log_det + quad_mu).t();
    let logits = u.square().matmul_t(prec).scale(-0.5) + u.matmul_t(mp);
    let w = logits.add_row(bias).softmax_rows();
    Ok(u * w.matmul(var * prec) + w.matmul(mp).scale(sd))
}

/// [`attn`] on plain values.
pub fn attn_value(u: &Tensor, z: &Tensor, d: usize) -> Result<Tensor> {
    let tape = Tape::new();
    attn(tape.constant(u.clone()), tape.constant(z.clone()), d).map(|v| v.value())
}

/// [`dattn_discrete`] on a value mixture; zero-weight impulses are dropped.
pub fn dattn_discrete_value(u: &Tensor, m: &DiscreteMixture, d: usize) -> Result<Tensor> {
    let keep: Vec<usize> = (0..m.len()).filter(|&i| m.weights[i] > 0.0).collect();
    if keep.is_empty() {
        return Err(Error::Contract("all mixture weights are zero".into()));
    }
    let tape = Tape::new();
    let log_pi = tape.constant(Tensor::row_vector(keep.iter().map(|&i| m.weights[i].ln()).collect()));
    let z = tape.constant(m.vectors.select_rows(&keep));
    dattn_discrete(tape.constant(u.clone()), log_pi, z, d).map(|v| v.value())
}

/// [`dattn_gaussian_mixture`] on plain values.
pub fn dattn_gaussian_mixture_value(u: &Tensor, post: &PosteriorParams, d: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = post.constants(&tape);
    dattn_gaussian_mixture(tape.constant(u.clone()), &vars, d).map(|v| v.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn attn_single_vector_and_symmetry() {
        let z = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let u = Tensor::from_vec(2, 3, vec![9.0, 1.0, -4.0, 0.0, 0.0, 1.0]);
        let out = attn_value(&u, &z, 3).unwrap();
        assert_eq!(out.row(0), z.row(0));
        assert_eq!(out.row(1), z.row(0));

        let z = Tensor::from_vec(2, 2, vec![1.0, 2.0, -1.0, -2.0]);
        let u = Tensor::from_vec(1, 2, vec![2.0, -1.0]);
        let out = attn_value(&u, &z, 2).unwrap();
        assert_abs_diff_eq!(out.data()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.data()[1], 0.0, epsilon = 1e-15);

        assert!(matches!(attn_value(&u, &Tensor::zeros(0, 2), 2), Err(Error::Contract(_))));
    }

    #[test]
    fn impulse_weights_examples() {
        let z = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, -1.0, 0.6, 0.8]);
        let m = impulse_mixture(&z, 2).unwrap();
        for w in m.weights() {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-15);
        }
        let d = 4usize;
        let norm2 = 2.0 * (d as f64).sqrt() * 3f64.ln();
        let z = Tensor::from_vec(2, 1, vec![0.0, norm2.sqrt()]);
        let m = impulse_mixture(&z, d).unwrap();
        assert_abs_diff_eq!(m.weights()[0], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(m.weights()[1], 0.75, epsilon = 1e-14);
    }

    #[test]
    fn discrete_examples() {
        let z = Tensor::from_vec(1, 2, vec![3.0, -2.0]);
        let m = DiscreteMixture::new(vec![1.0], z.clone()).unwrap();
        let u = Tensor::from_vec(1, 2, vec![-7.0, 0.1]);
        assert_eq!(dattn_discrete_value(&u, &m, 2).unwrap(), z);

        let z = Tensor::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let m = DiscreteMixture::new(vec![0.5, 0.5], z).unwrap();
        let u = Tensor::from_vec(1, 2, vec![0.0, 5.0]);
        let out = dattn_discrete_value(&u, &m, 2).unwrap();
        assert_abs_diff_eq!(out.data()[0], 0.0, epsilon = 1e-15);

        let z = Tensor::from_vec(2, 1, vec![1.0, 40.0]);
        let m = DiscreteMixture::new(vec![1.0, 0.0], z).unwrap();
        let out = dattn_discrete_value(&Tensor::scalar(40.0), &m, 1).unwrap();
        assert_eq!(out.item(), 1.0);
    }

    #[test]
    fn gaussian_mixture_single_component_limits() {
        let d = 4usize;
        let sd = 2.0f64;
        let mu = vec![1.0, -3.0, 0.5, 2.0];
        let post = PosteriorParams::new(
            Tensor::col_vector(vec![1.7]),
            Tensor::from_vec(1, 4, mu.clone()),
            Tensor::filled(1, 4, 0.5 * sd.ln()),
        )
        .unwrap();
        let u = Tensor::from_vec(1, 4, vec![0.2, 0.4, -1.0, 3.0]);
        let out = dattn_gaussian_mixture_value(&u, &post, d).unwrap();
        for h in 0..4 {
            assert_abs_diff_eq!(out.data()[h], (u.data()[h] + mu[h]) / 2.0, epsilon = 1e-14);
        }
        let sharp = PosteriorParams::new(
            Tensor::col_vector(vec![1.0]),
            Tensor::from_vec(1, 4, mu.clone()),
            Tensor::filled(1, 4, -8.0),
        )
        .unwrap();
        let out = dattn_gaussian_mixture_value(&u, &sharp, d).unwrap();
        for h in 0..4 {
            assert_abs_diff_eq!(out.data()[h], mu[h], epsilon = 1e-6);
        }
        let masked = PosteriorParams::new(Tensor::col_vector(vec![0.0]), Tensor::zeros(1, 4), Tensor::zeros(1, 4));
        assert!(masked.is_err());
    }
}
