//! Finite-difference check of the full training loss.

use nvib_core::numerics::GradCheckConfig;
use nvib_core::NoiseSource;

use crate::error::Result;
use crate::model::Autoencoder;
use crate::sequence::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    /// Parameter name and element index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Compares [`Autoencoder::batch_gradients`] with central differences of
/// the mean training loss, replaying the same noise stream for every
/// evaluation.
pub fn check_model_gradients(
    model: &mut Autoencoder,
    batch: &[TokenSequence],
    noise_seed: u64,
    cfg: GradCheckConfig,
) -> Result<ModelGradReport> {
    let (_, analytic) = model.batch_gradients(batch, &mut NoiseSource::new(noise_seed))?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut report = ModelGradReport { max_rel_error: 0.0, worst: (String::new(), 0), checked: 0 };
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let x0 = model.params().values()[p].data()[k];
            model.params_mut().values_mut()[p].data_mut()[k] = x0 + cfg.step;
            let fp = model.train_loss(batch, &mut NoiseSource::new(noise_seed))?;
            model.params_mut().values_mut()[p].data_mut()[k] = x0 - cfg.step;
            let fm = model.train_loss(batch, &mut NoiseSource::new(noise_seed))?;
            model.params_mut().values_mut()[p].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (names[p].clone(), k);
            }
        }
    }
    Ok(report)
}
