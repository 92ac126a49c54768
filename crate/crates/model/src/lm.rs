//! Decoder-only language model used to score fluency and diversity.

use nvib_core::numerics::{Bound, Linear, Params};
use nvib_core::{NoiseSource, Tape, Var};

use crate::error::{ModelError, Result};
use crate::layers::{DecoderLayer, Embedding, Pass};
use crate::model::token_nll;
use crate::optim::Adam;
use crate::sequence::TokenSequence;
use crate::train::TrainConfig;

/// Anything that assigns next-token log-probabilities.
pub trait TokenScorer {
    /// Summed negative log-likelihood of the targets and their count.
    fn nll(&self, seq: &TokenSequence) -> Result<(f64, usize)>;
}

/// Every token equally likely.
#[derive(Clone, Copy, Debug)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl TokenScorer for UniformScorer {
    fn nll(&self, seq: &TokenSequence) -> Result<(f64, usize)> {
        let n = seq.len();
        Ok((n as f64 * (self.vocab_size as f64).ln(), n))
    }
}

/// `exp` of the mean token negative log-likelihood.
pub fn perplexity<S: TokenScorer + ?Sized>(scorer: &S, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(ModelError::Input("perplexity of an empty corpus".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for seq in corpus {
        let (nll, n) = scorer.nll(seq)?;
        total += nll;
        count += n;
    }
    Ok((total / count as f64).exp())
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    params: Params,
    embed: Embedding,
    block: DecoderLayer,
    out: Linear,
    dropout: f64,
    optimizer: Adam,
    noise: NoiseSource,
}

impl LanguageModel {
    pub fn new(vocab_size: usize, dim: usize, ff_dim: usize, dropout: f64, train: TrainConfig, seed: u64) -> Self {
        let mut noise = NoiseSource::new(seed);
        let mut params = Params::new();
        let embed = Embedding::new(&mut params, "lm.embed", vocab_size, dim, &mut noise);
        let block = DecoderLayer::new(&mut params, "lm.block", dim, ff_dim, false, &mut noise);
        let out = Linear::new(&mut params, "lm.output", dim, vocab_size, &mut noise);
        let noise = noise.fork(1);
        LanguageModel { params, embed, block, out, dropout, optimizer: Adam::new(train.lr, train.clip), noise }
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.steps()
    }

    fn logits<'t>(&self, bound: &Bound<'t>, seq: &TokenSequence, pass: &mut Pass<'_>) -> Result<Var<'t>> {
        let x = self.embed.apply(bound, &seq.decoder_input());
        let h = self.block.apply(bound, x, None, pass)?;
        Ok(self.out.apply(bound, h))
    }

    pub fn train_step(&mut self, batch: &[TokenSequence]) -> Result<f64> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut losses = Vec::with_capacity(batch.len());
        let mut noise = self.noise.clone();
        for seq in batch {
            let mut pass = Pass::train(&mut noise, self.dropout);
            let logits = self.logits(&bound, seq, &mut pass)?;
            losses.push(token_nll(logits, &seq.targets()));
        }
        self.noise = noise;
        let loss = Var::concat_rows(&losses).mean();
        let value = loss.item();
        let mut grads = tape.backward(loss)?;
        let grads = bound.gradients(&mut grads);
        self.optimizer.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Trains for `steps` mini-batches drawn uniformly from `corpus`.
    pub fn fit(&mut self, corpus: &[TokenSequence], steps: usize, batch_size: usize) -> Result<f64> {
        if corpus.is_empty() {
            return Err(ModelError::Input("empty training corpus".into()));
        }
        let mut last = f64::NAN;
        for _ in 0..steps {
            let batch: Vec<TokenSequence> =
                (0..batch_size).map(|_| corpus[self.noise.below(corpus.len())].clone()).collect();
            last = self.train_step(&batch)?;
        }
        Ok(last)
    }
}

impl TokenScorer for LanguageModel {
    fn nll(&self, seq: &TokenSequence) -> Result<(f64, usize)> {
        if self.steps() == 0 {
            return Err(ModelError::Unsupported("language model has not been trained".into()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let logits = self.logits(&bound, seq, &mut Pass::eval())?;
        let n = seq.len();
        Ok((token_nll(logits, &seq.targets()).item() * n as f64, n))
    }
}
