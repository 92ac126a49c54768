use std::collections::BTreeMap;

use nvib_core::NoiseSource;

use crate::error::{ModelError, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
/// Ids below this are reserved markers.
pub const SPECIAL_TOKENS: usize = 3;

/// A sentence of ordinary token ids. The encoder sees the tokens followed
/// by [`EOS`]; the decoder predicts the same from a [`BOS`]-shifted input.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if let Some(t) = tokens.iter().find(|&&t| t == BOS || t == EOS) {
            return Err(ModelError::Input(format!("marker id {t} inside a sentence")));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Number of encoder positions, `tokens + 1`.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encoder_input(&self) -> Vec<usize> {
        self.tokens.iter().copied().chain([EOS]).collect()
    }

    pub fn decoder_input(&self) -> Vec<usize> {
        [BOS].into_iter().chain(self.tokens.iter().copied()).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.encoder_input()
    }
}

/// Drops a trailing end marker from decoder output.
pub fn strip_eos(ids: &[usize]) -> &[usize] {
    match ids.iter().position(|&t| t == EOS) {
        Some(i) => &ids[..i],
        None => ids,
    }
}

/// Empirical distribution of encoder lengths `n`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LengthHistogram {
    counts: BTreeMap<usize, usize>,
}

impl LengthHistogram {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = BTreeMap::new();
        for n in lengths {
            *counts.entry(n).or_insert(0) += 1;
        }
        LengthHistogram { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }

    pub fn probability(&self, n: usize) -> f64 {
        self.counts.get(&n).copied().unwrap_or(0) as f64 / self.total() as f64
    }

    pub fn sample(&self, noise: &mut NoiseSource) -> Result<usize> {
        let total = self.total();
        if total == 0 {
            return Err(ModelError::Input("empty length histogram".into()));
        }
        let mut r = noise.below(total);
        for (&n, &c) in &self.counts {
            if r < c {
                return Ok(n);
            }
            r -= c;
        }
        unreachable!("draw below histogram total")
    }
}
