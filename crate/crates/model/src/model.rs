//! The encoder-decoder and its training objective.

use nvib_core::distributions::{GammaSampler, GaussianDiag};
use nvib_core::numerics::{Bound, Linear, Params};
use nvib_core::nvib::retained_proportion;
use nvib_core::{NoiseSource, Tape, Tensor, Var};

use crate::config::{ModelConfig, Variant};
use crate::error::{ModelError, Result};
use crate::latent::{Head, Latent, LatentVars};
use crate::layers::{DecoderLayer, Embedding, EncoderLayer, Pass};
use crate::sequence::{LengthHistogram, TokenSequence, BOS, EOS};

/// Reconstruction and KL terms; `total = l_r + λ_D l_d + λ_G l_g`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub l_r: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub total: f64,
}

impl LossRecord {
    fn accumulate(&mut self, other: &LossRecord, w: f64) {
        self.l_r += w * other.l_r;
        self.l_d += w * other.l_d;
        self.l_g += w * other.l_g;
        self.total += w * other.total;
    }
}

/// Evaluation-mode statistics over a set of sentences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: LossRecord,
    /// Teacher-forced argmax accuracy over all target tokens.
    pub token_accuracy: f64,
    /// Mean retained proportion; `None` for variants without pseudo-counts.
    pub nu: Option<f64>,
}

pub(crate) struct SentenceOut<'t> {
    pub logits: Var<'t>,
    pub total: Var<'t>,
    pub record: LossRecord,
    pub nu: Option<f64>,
}

/// Single-layer, single-head Transformer autoencoder.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    config: ModelConfig,
    seed: u64,
    params: Params,
    embed: Embedding,
    encoder: EncoderLayer,
    head: Head,
    decoder: DecoderLayer,
    out: Linear,
}

pub(crate) fn token_nll<'t>(logits: Var<'t>, targets: &[usize]) -> Var<'t> {
    let picks: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    -logits.log_softmax_rows().pick(&picks).mean()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Autoencoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut noise = NoiseSource::new(seed);
        let mut params = Params::new();
        let (d, h) = (config.model_dim, config.ff_dim);
        let embed = Embedding::new(&mut params, "embed", config.vocab_size, d, &mut noise);
        let encoder = EncoderLayer::new(&mut params, "encoder", d, h, &mut noise);
        let head = Head::new(&mut params, config.variant, d, config.nvib, config.alpha_init, &mut noise);
        let decoder = DecoderLayer::new(&mut params, "decoder", d, h, true, &mut noise);
        let out = Linear::new(&mut params, "output", d, config.vocab_size, &mut noise);
        Ok(Autoencoder { config, seed, params, embed, encoder, head, decoder, out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Seed the parameters were initialised from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(ModelError::Input(format!(
                "sequence of length {} exceeds max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = seq.tokens().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Input(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn encode_on<'t>(&self, bound: &Bound<'t>, ids: &[usize], pass: &mut Pass<'_>) -> Var<'t> {
        let x = self.embed.apply(bound, ids);
        self.encoder.apply(bound, x, pass)
    }

    fn decode_on<'t>(
        &self,
        bound: &Bound<'t>,
        ids: &[usize],
        latent: &LatentVars<'t>,
        pass: &mut Pass<'_>,
    ) -> Result<Var<'t>> {
        let y = self.embed.apply(bound, ids);
        let h = self.decoder.apply(bound, y, Some(latent), pass)?;
        Ok(self.out.apply(bound, h))
    }

    /// `(λ_D, λ_G)` for a sentence of `n` encoder positions.
    pub fn lambdas(&self, n: usize) -> (f64, f64) {
        let d = self.config.model_dim;
        match self.head {
            Head::Identity => (0.0, 0.0),
            Head::Gaussian { .. } => (0.0, self.config.nvib.lambda_g_prime / (n * d) as f64),
            Head::Nvib(_) => self.config.nvib.lambdas(n, d),
        }
    }

    pub(crate) fn sentence_on<'t>(
        &self,
        bound: &Bound<'t>,
        seq: &TokenSequence,
        pass: &mut Pass<'_>,
    ) -> Result<SentenceOut<'t>> {
        self.check(seq)?;
        let states = self.encode_on(bound, &seq.encoder_input(), pass);
        let head = self.head.apply(bound, states, pass)?;
        let logits = self.decode_on(bound, &seq.decoder_input(), &head.latent, pass)?;
        let l_r = token_nll(logits, &seq.targets());
        let (ld, lg) = self.lambdas(seq.len());
        let total = l_r + head.l_d.scale(ld) + head.l_g.scale(lg);
        let record = LossRecord { l_r: l_r.item(), l_d: head.l_d.item(), l_g: head.l_g.item(), total: total.item() };
        let nu = match head.posterior {
            Some(p) => Some(retained_proportion(&p.value()?)),
            None => None,
        };
        Ok(SentenceOut { logits, total, record, nu })
    }

    /// Mean training loss over `batch` and its gradient, in parameter order.
    pub fn batch_gradients(&self, batch: &[TokenSequence], noise: &mut NoiseSource) -> Result<(LossRecord, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let w = 1.0 / batch.len() as f64;
        let mut record = LossRecord::default();
        let mut totals = Vec::with_capacity(batch.len());
        for seq in batch {
            let mut pass = Pass::train(noise, self.config.dropout);
            let out = self.sentence_on(&bound, seq, &mut pass)?;
            record.accumulate(&out.record, w);
            totals.push(out.total);
        }
        let loss = Var::concat_rows(&totals).mean();
        let mut grads = tape.backward(loss)?;
        Ok((record, bound.gradients(&mut grads)))
    }

    /// Mean training loss with fixed noise, without gradients.
    pub fn train_loss(&self, batch: &[TokenSequence], noise: &mut NoiseSource) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut total = 0.0;
        for seq in batch {
            let mut pass = Pass::train(noise, self.config.dropout);
            total += self.sentence_on(&bound, seq, &mut pass)?.record.total;
        }
        Ok(total / batch.len() as f64)
    }

    /// Evaluation-mode loss, teacher-forced accuracy and `ν`.
    pub fn evaluate(&self, seqs: &[TokenSequence]) -> Result<EvalStats> {
        if seqs.is_empty() {
            return Err(ModelError::Input("nothing to evaluate".into()));
        }
        let w = 1.0 / seqs.len() as f64;
        let mut loss = LossRecord::default();
        let (mut correct, mut count) = (0usize, 0usize);
        let mut nus = Vec::new();
        for seq in seqs {
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let out = self.sentence_on(&bound, seq, &mut Pass::eval())?;
            loss.accumulate(&out.record, w);
            let logits = out.logits.value();
            for (i, &t) in seq.targets().iter().enumerate() {
                correct += usize::from(argmax(logits.row(i)) == t);
                count += 1;
            }
            nus.extend(out.nu);
        }
        let nu = (!nus.is_empty()).then(|| nus.iter().sum::<f64>() / nus.len() as f64);
        Ok(EvalStats { loss, token_accuracy: correct as f64 / count as f64, nu })
    }

    /// Encoder states of `seq` in evaluation mode.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.check(seq)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        Ok(self.encode_on(&bound, &seq.encoder_input(), &mut Pass::eval()).value())
    }

    /// Latent of `seq`: the test-time form, or a training sample when
    /// `noise` is given.
    pub fn latent(&self, seq: &TokenSequence, noise: Option<&mut NoiseSource>) -> Result<Latent> {
        self.check(seq)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut pass = match noise {
            Some(n) => Pass::train(n, 0.0),
            None => Pass::eval(),
        };
        let states = self.encode_on(&bound, &seq.encoder_input(), &mut pass);
        self.head.apply(&bound, states, &mut pass)?.latent.value()
    }

    /// Evaluation-mode retained proportion; `None` without pseudo-counts.
    pub fn retained_proportion(&self, seq: &TokenSequence) -> Result<Option<f64>> {
        match self.latent(seq, None)? {
            Latent::Mixture(post) => Ok(Some(retained_proportion(&post))),
            _ => Ok(None),
        }
    }

    /// Evaluation-mode decoder logits for a decoder input.
    pub fn decoder_logits(&self, input: &[usize], latent: &Latent) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let lv = latent.on(&tape);
        Ok(self.decode_on(&bound, input, &lv, &mut Pass::eval())?.value())
    }

    /// Greedy decoding until [`EOS`] or `2 n` tokens; the end marker is
    /// included when emitted.
    pub fn decode_greedy(&self, latent: &Latent, n: usize) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let lv = latent.on(&tape);
        let mut ids = vec![BOS];
        let mut out = Vec::new();
        while out.len() < 2 * n {
            let logits = self.decode_on(&bound, &ids, &lv, &mut Pass::eval())?;
            let next = logits.with_value(|l| argmax(l.row(l.rows() - 1)));
            out.push(next);
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }

    /// Greedy reconstruction through the test-time latent.
    pub fn reconstruct(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        let latent = self.latent(seq, None)?;
        self.decode_greedy(&latent, seq.len())
    }

    /// A latent drawn from the (conditional) prior for `n` positions.
    pub fn prior_latent(&self, n: usize, noise: &mut NoiseSource) -> Result<Latent> {
        let d = self.config.model_dim;
        match &self.head {
            Head::Identity => Err(ModelError::Unsupported(format!(
                "variant {} has no prior to sample from",
                self.config.variant
            ))),
            Head::Gaussian { select, .. } => Ok(Latent::Vectors(noise.normal_tensor(select.count(n), d))),
            Head::Nvib(layer) => {
                let concentration = layer.config.target_alpha0(n) / n as f64;
                let weights = GammaSampler::Reparameterized.dirichlet(&vec![concentration; n], noise)?;
                let base = GaussianDiag::standard(d);
                let vectors = Tensor::from_vec(
                    n,
                    d,
                    (0..n * d).map(|k| base.mu()[k % d] + base.sigma()[k % d] * noise.normal()).collect(),
                );
                let log_weights = Tensor::row_vector(weights.iter().map(|w| w.ln()).collect());
                Ok(Latent::Discrete { log_weights, vectors })
            }
        }
    }

    /// Samples a length from `lengths`, a latent from the prior, and
    /// decodes greedily. Returns the decoded ids and the sampled length.
    pub fn generate_from_prior(
        &self,
        lengths: &LengthHistogram,
        noise: &mut NoiseSource,
    ) -> Result<(Vec<usize>, usize)> {
        if !self.config.variant.has_prior() {
            return Err(ModelError::Unsupported("the plain Transformer has no prior".into()));
        }
        let n = lengths.sample(noise)?;
        let latent = self.prior_latent(n, noise)?;
        Ok((self.decode_greedy(&latent, n)?, n))
    }

    /// Number of latent vectors the decoder sees for `n` positions.
    pub fn latent_size(&self, n: usize) -> usize {
        match &self.head {
            Head::Identity => n,
            Head::Gaussian { select, .. } => select.count(n),
            Head::Nvib(_) => n + 1,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }
}
