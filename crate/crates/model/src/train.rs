use nvib_core::NoiseSource;

use crate::error::{ModelError, Result};
use crate::model::{Autoencoder, LossRecord};
use crate::optim::Adam;
use crate::sequence::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 16, lr: 5e-4, clip: Some(0.1) }
    }
}

impl TrainConfig {
    /// Optimiser settings matching [`ModelConfig::full_scale`](crate::ModelConfig::full_scale).
    pub fn full_scale() -> Self {
        TrainConfig { batch_size: 256, lr: 5e-5, clip: Some(0.1) }
    }
}

/// Mini-batch trainer over shuffled epochs.
pub struct Trainer {
    pub model: Autoencoder,
    pub config: TrainConfig,
    optimizer: Adam,
    noise: NoiseSource,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: Autoencoder, config: TrainConfig, seed: u64) -> Self {
        let optimizer = Adam::new(config.lr, config.clip);
        Trainer { model, config, optimizer, noise: NoiseSource::new(seed), order: Vec::new(), cursor: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.steps()
    }

    fn next_batch(&mut self, corpus: &[TokenSequence]) -> Vec<TokenSequence> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(corpus.len()) {
            if self.cursor >= self.order.len() || self.order.len() != corpus.len() {
                self.order = (0..corpus.len()).collect();
                for i in (1..self.order.len()).rev() {
                    let j = self.noise.below(i + 1);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            batch.push(corpus[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        batch
    }

    /// One optimiser step on the next mini-batch.
    pub fn step(&mut self, corpus: &[TokenSequence]) -> Result<LossRecord> {
        if corpus.is_empty() {
            return Err(ModelError::Input("empty training corpus".into()));
        }
        let batch = self.next_batch(corpus);
        self.step_on(&batch)
    }

    /// One optimiser step on a given batch.
    pub fn step_on(&mut self, batch: &[TokenSequence]) -> Result<LossRecord> {
        let (record, grads) = self.model.batch_gradients(batch, &mut self.noise)?;
        self.optimizer.step(self.model.params_mut(), &grads)?;
        Ok(record)
    }
}
