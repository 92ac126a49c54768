//! Train, evaluate and generate pipelines behind the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nvib_core::NoiseSource;
use nvib_model::checkpoint::{self, Checkpoint};
use nvib_model::sequence::{strip_eos, BOS, SPECIAL_TOKENS, UNK};
use nvib_model::{perplexity, Autoencoder, LossRecord, TokenSequence, Trainer};

use crate::config::RunConfig;
use crate::corpus::{Corpus, Vocabulary};
use crate::error::{HarnessError, Result};
use crate::metrics::{bleu, eval_fppl_rppl, train_lm, LmSettings};
use crate::synthetic::{markov_corpus, MarkovSpec};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss_curves.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SAMPLES_FILE: &str = "samples.txt";
/// Seed of the built-in corpus, fixed so runs with different seeds share data.
pub const SYNTHETIC_SEED: u64 = 1;

const VOCAB_KEY: &str = "vocab";

/// Training and held-out sentences over one vocabulary.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Corpus,
    pub validation: Corpus,
}

fn raw_lines(cfg: &RunConfig) -> Result<Vec<String>> {
    match &cfg.data {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Input(format!("cannot read {}: {e}", path.display())))?;
            Ok(text.lines().map(String::from).collect())
        }
        None => Ok(markov_corpus(&MarkovSpec::default(), SYNTHETIC_SEED)),
    }
}

/// Reads the configured corpus, or the synthetic one, and splits it. An
/// existing vocabulary is reused when given.
pub fn load_data(cfg: &RunConfig, vocab: Option<Vocabulary>) -> Result<Data> {
    let lines = raw_lines(cfg)?;
    let bounds = (cfg.min_tokens, cfg.max_tokens);
    let corpus = match vocab {
        Some(v) => Corpus::with_vocab(&lines, v, cfg.tokenizer, bounds)?,
        None => Corpus::from_lines(&lines, cfg.tokenizer, bounds)?,
    };
    let (train, validation) = corpus.split(cfg.validation_fraction);
    let validation = if validation.is_empty() { train.clone() } else { validation };
    Ok(Data { train, validation })
}

/// Held-out metrics of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: LossRecord,
    pub token_accuracy: f64,
    pub nu: Option<f64>,
    pub bleu: f64,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut r = vec![
            ("loss", self.loss.total),
            ("l_r", self.loss.l_r),
            ("l_d", self.loss.l_d),
            ("l_g", self.loss.l_g),
            ("token_accuracy", self.token_accuracy),
            ("bleu", self.bleu),
        ];
        if let Some(nu) = self.nu {
            r.push(("nu", nu));
        }
        r
    }
}

pub fn evaluate(model: &Autoencoder, seqs: &[TokenSequence]) -> Result<EvalReport> {
    let stats = model.evaluate(seqs)?;
    let mut cands = Vec::with_capacity(seqs.len());
    let mut refs = Vec::with_capacity(seqs.len());
    for s in seqs {
        cands.push(strip_eos(&model.reconstruct(s)?).to_vec());
        refs.push(s.tokens().to_vec());
    }
    Ok(EvalReport { loss: stats.loss, token_accuracy: stats.token_accuracy, nu: stats.nu, bleu: bleu(&cands, &refs)? })
}

/// One row of the loss curve: the mean training loss since the last row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: LossRecord,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("step,l_r,l_d,l_g,total\n");
    for p in points {
        let l = &p.loss;
        writeln!(s, "{},{},{},{},{}", p.step, l.l_r, l.l_d, l.l_g, l.total).expect("write to string");
    }
    s
}

pub fn metrics_csv(rows: &[(&str, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        writeln!(s, "{k},{v}").expect("write to string");
    }
    s
}

pub struct TrainOutcome {
    pub model: Autoencoder,
    pub curve: Vec<CurvePoint>,
    pub report: EvalReport,
    pub data: Data,
}

/// Trains per `cfg`; `progress` sees every curve point as it is logged.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(&CurvePoint)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg, None)?;
    let max_len = data.train.max_len().max(data.validation.max_len());
    let model = Autoencoder::new(cfg.model_config(data.train.vocab.len(), max_len)?, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train_config(), cfg.seed.wrapping_add(1));
    let mut curve = Vec::new();
    let mut window = LossRecord::default();
    let mut in_window = 0usize;
    for step in 1..=cfg.steps {
        let r = trainer.step(&data.train.sentences)?;
        window.l_r += r.l_r;
        window.l_d += r.l_d;
        window.l_g += r.l_g;
        window.total += r.total;
        in_window += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let k = in_window as f64;
            let loss = LossRecord { l_r: window.l_r / k, l_d: window.l_d / k, l_g: window.l_g / k, total: window.total / k };
            let point = CurvePoint { step, loss };
            progress(&point);
            curve.push(point);
            window = LossRecord::default();
            in_window = 0;
        }
    }
    let report = evaluate(&trainer.model, &data.validation.sentences)?;
    Ok(TrainOutcome { model: trainer.model, curve, report, data })
}

pub fn checkpoint_metadata(cfg: &RunConfig, vocab: &Vocabulary) -> BTreeMap<String, String> {
    let mut m = cfg.to_pairs();
    m.insert(VOCAB_KEY.into(), vocab.serialize());
    m
}

/// Run configuration and vocabulary stored with a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(RunConfig, Vocabulary)> {
    let mut pairs = ckpt.metadata.clone();
    let vocab = pairs
        .remove(VOCAB_KEY)
        .map(|v| Vocabulary::deserialize(&v))
        .ok_or_else(|| HarnessError::Input("checkpoint carries no vocabulary".into()))?;
    Ok((RunConfig::from_pairs(&pairs)?, vocab))
}

/// Trains and writes the loss curve, metrics and checkpoint into `out`.
pub fn train_to_dir(cfg: &RunConfig, out: &Path, progress: impl FnMut(&CurvePoint)) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out)?;
    let outcome = train(cfg, progress)?;
    std::fs::write(out.join(LOSS_FILE), curve_csv(&outcome.curve))?;
    std::fs::write(out.join(METRICS_FILE), metrics_csv(&outcome.report.rows()))?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &outcome.model, &checkpoint_metadata(cfg, &outcome.data.train.vocab))?;
    Ok(outcome)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig, Data)> {
    if !path.exists() {
        return Err(HarnessError::Input(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = checkpoint::load(path)?;
    let (cfg, vocab) = restore(&ckpt)?;
    let data = load_data(&cfg, Some(vocab))?;
    Ok((ckpt, cfg, data))
}

/// Held-out metrics of a saved model; `data` overrides the stored corpus.
pub fn eval_checkpoint(path: &Path, data: Option<PathBuf>) -> Result<EvalReport> {
    let (ckpt, mut cfg, stored) = load_checkpoint(path)?;
    let seqs = match data {
        Some(p) => {
            cfg.data = Some(p);
            cfg.validation_fraction = 0.0;
            load_data(&cfg, Some(stored.train.vocab.clone()))?.train.sentences
        }
        None => stored.validation.sentences,
    };
    evaluate(&ckpt.model, &seqs)
}

/// Ids of a decoded sample as a sentence; stray start markers become UNK.
pub fn as_sentence(ids: &[usize]) -> TokenSequence {
    let tokens = strip_eos(ids).iter().map(|&t| if t == BOS { UNK } else { t }).collect();
    TokenSequence::new(tokens).expect("markers removed")
}

pub struct GenerationReport {
    pub samples: Vec<TokenSequence>,
    pub f_ppl: f64,
    pub r_ppl: f64,
    /// F-PPL of uniform random strings with the sampled lengths.
    pub random_f_ppl: f64,
}

/// Draws `count` prior samples and scores them with data-trained and
/// sample-trained language models.
pub fn generate(model: &Autoencoder, data: &Data, count: usize, lm: &LmSettings, seed: u64) -> Result<GenerationReport> {
    let mut noise = NoiseSource::new(seed);
    let hist = data.train.length_histogram();
    let vocab = data.train.vocab.len();
    let mut samples = Vec::with_capacity(count);
    let mut random = Vec::with_capacity(count);
    for _ in 0..count {
        let (ids, n) = model.generate_from_prior(&hist, &mut noise)?;
        samples.push(as_sentence(&ids));
        let toks = (0..n - 1).map(|_| SPECIAL_TOKENS + noise.below(vocab - SPECIAL_TOKENS)).collect();
        random.push(TokenSequence::new(toks)?);
    }
    let data_lm = train_lm(&data.train.sentences, vocab, lm, seed.wrapping_add(1))?;
    let g = eval_fppl_rppl(&samples, &data_lm, &data.validation.sentences, vocab, lm, seed.wrapping_add(2))?;
    let random_f_ppl = perplexity(&data_lm, &random)?;
    Ok(GenerationReport { samples, f_ppl: g.f_ppl, r_ppl: g.r_ppl, random_f_ppl })
}

/// Mean `ν` of held-out sentences grouped by encoder length.
pub fn nu_by_length(model: &Autoencoder, seqs: &[TokenSequence]) -> Result<Vec<(usize, f64, usize)>> {
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in seqs {
        if let Some(nu) = model.retained_proportion(s)? {
            let e = groups.entry(s.len()).or_insert((0.0, 0));
            e.0 += nu;
            e.1 += 1;
        }
    }
    if groups.is_empty() {
        return Err(HarnessError::Input(format!("variant {} has no pseudo-counts", model.variant())));
    }
    Ok(groups.into_iter().map(|(n, (sum, k))| (n, sum / k as f64, k)).collect())
}
