use nvib_core::numerics::Params;
use nvib_core::Tensor;

use crate::error::{ModelError, Result};

/// Adam with optional global gradient-norm clipping and a constant rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(ModelError::Input(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.values().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(ModelError::Core(nvib_core::Error::NonFinite(0)));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
