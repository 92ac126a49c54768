//! Reconstruction and generation metrics.

use std::collections::HashMap;

use nvib_model::{perplexity, LanguageModel, TokenScorer, TokenSequence, TrainConfig};

use crate::error::{HarnessError, Result};

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram totals for orders 1 to 4.
pub fn ngram_table(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> [(usize, usize); 4] {
    let mut table = [(0, 0); 4];
    for (c, r) in candidates.iter().zip(references) {
        for (k, slot) in table.iter_mut().enumerate() {
            let rc = ngram_counts(r, k + 1);
            for (g, n) in ngram_counts(c, k + 1) {
                slot.0 += n.min(rc.get(g).copied().unwrap_or(0));
                slot.1 += n;
            }
        }
    }
    table
}

/// Corpus BLEU-4 in `[0, 100]`, with add-one smoothing of the orders 2 to
/// 4 and the usual brevity penalty.
pub fn bleu(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(HarnessError::Input(format!(
            "BLEU needs matching non-empty inputs, got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    let table = ngram_table(candidates, references);
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 || table[0].0 == 0 {
        return Ok(0.0);
    }
    let mut log_p = (table[0].0 as f64 / table[0].1 as f64).ln();
    for &(m, t) in &table[1..] {
        log_p += ((m + 1) as f64 / (t + 1) as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_p / 4.0).exp())
}

/// Forward and reverse perplexity of generated sentences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationPerplexity {
    /// Data-trained language model scored on the generations.
    pub f_ppl: f64,
    /// Generation-trained language model scored on held-out data.
    pub r_ppl: f64,
}

/// Settings of the external language model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSettings {
    pub dim: usize,
    pub ff_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        LmSettings { dim: 32, ff_dim: 64, steps: 1500, batch_size: 16, lr: 2e-3 }
    }
}

pub fn train_lm(corpus: &[TokenSequence], vocab: usize, s: &LmSettings, seed: u64) -> Result<LanguageModel> {
    let train = TrainConfig { batch_size: s.batch_size, lr: s.lr, clip: Some(1.0) };
    let mut lm = LanguageModel::new(vocab, s.dim, s.ff_dim, 0.1, train, seed);
    lm.fit(corpus, s.steps, s.batch_size)?;
    Ok(lm)
}

/// F-PPL under `data_lm`, and R-PPL of a model trained on `generated`.
pub fn eval_fppl_rppl(
    generated: &[TokenSequence],
    data_lm: &LanguageModel,
    validation: &[TokenSequence],
    vocab: usize,
    s: &LmSettings,
    seed: u64,
) -> Result<GenerationPerplexity> {
    let f_ppl = perplexity(data_lm, generated)?;
    let gen_lm = train_lm(generated, vocab, s, seed)?;
    let r_ppl = perplexity(&gen_lm, validation)?;
    Ok(GenerationPerplexity { f_ppl, r_ppl })
}

/// Perplexity of any scorer; re-exported for the command line.
pub fn ppl<S: TokenScorer + ?Sized>(scorer: &S, corpus: &[TokenSequence]) -> Result<f64> {
    Ok(perplexity(scorer, corpus)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_is_hundred() {
        let s = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 3, 4]];
        assert!((bleu(&s, &s).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(bleu(&[vec![3, 4, 5]], &[vec![6, 7, 8]]).unwrap(), 0.0);
    }

    #[test]
    fn empty_or_mismatched_inputs_fail() {
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&[vec![1]], &[]).is_err());
    }

    #[test]
    fn two_sentence_table() {
        // cand 1: a b c d e   ref 1: a b c x e
        // cand 2: a a b       ref 2: a b b
        let (a, b, c, d, e, x) = (3, 4, 5, 6, 7, 8);
        let cands = vec![vec![a, b, c, d, e], vec![a, a, b]];
        let refs = vec![vec![a, b, c, x, e], vec![a, b, b]];
        let t = ngram_table(&cands, &refs);
        // unigrams: 4/5 and a(min(2,1)=1)+b(1) = 2/3
        assert_eq!(t[0], (6, 8));
        // bigrams: ab bc / ab bc cd de -> 2/4; aa ab -> ab 1/2
        assert_eq!(t[1], (3, 6));
        // trigrams: abc / abc bcd cde -> 1/3; aab -> 0/1
        assert_eq!(t[2], (1, 4));
        // 4-grams: none of abcd bcde matches; 0/2
        assert_eq!(t[3], (0, 2));
        let expected = 100.0 * (((6.0f64 / 8.0).ln() + (4.0f64 / 7.0).ln() + (2.0f64 / 5.0).ln() + (1.0f64 / 3.0).ln()) / 4.0).exp();
        assert!((bleu(&cands, &refs).unwrap() - expected).abs() < 1e-9);
    }
}
