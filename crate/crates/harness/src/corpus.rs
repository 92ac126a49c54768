//! Sentence corpora, tokenisation and vocabularies.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nvib_model::sequence::{strip_eos, SPECIAL_TOKENS, UNK};
use nvib_model::{LengthHistogram, TokenSequence};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerMode {
    Char,
    Whitespace,
}

impl FromStr for TokenizerMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizerMode::Char),
            "whitespace" | "word" => Ok(TokenizerMode::Whitespace),
            other => Err(HarnessError::Input(format!("unknown tokenizer {other:?}"))),
        }
    }
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerMode::Char => "char",
            TokenizerMode::Whitespace => "whitespace",
        })
    }
}

impl TokenizerMode {
    pub fn split(self, line: &str) -> Vec<String> {
        match self {
            TokenizerMode::Char => line.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
            TokenizerMode::Whitespace => line.split_whitespace().map(String::from).collect(),
        }
    }

    fn join(self, tokens: &[&str]) -> String {
        match self {
            TokenizerMode::Char => tokens.concat(),
            TokenizerMode::Whitespace => tokens.join(" "),
        }
    }
}

/// Token strings indexed by id; the first ids are the reserved markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ordinary tokens ordered by descending frequency, then lexically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *freq.entry(t).or_insert(0) += 1;
        }
        let mut ordered: Vec<(&str, usize)> = freq.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Vocabulary::from_tokens(ordered.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    /// From ordinary tokens in id order.
    pub fn from_tokens(ordinary: Vec<String>) -> Self {
        let mut tokens: Vec<String> = ["<s>", "</s>", "<unk>"].iter().map(|s| s.to_string()).collect();
        debug_assert_eq!(tokens.len(), SPECIAL_TOKENS);
        tokens.extend(ordinary);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Ordinary tokens in id order.
    pub fn ordinary(&self) -> &[String] {
        &self.tokens[SPECIAL_TOKENS..]
    }

    /// One token per line, for storing alongside checkpoints.
    pub fn serialize(&self) -> String {
        self.ordinary().join("\n")
    }

    pub fn deserialize(s: &str) -> Self {
        Vocabulary::from_tokens(s.lines().map(String::from).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub sentences: Vec<TokenSequence>,
    pub vocab: Vocabulary,
    pub mode: TokenizerMode,
}

impl Corpus {
    /// Tokenises `lines`, keeps sentences whose token count lies within
    /// `bounds` (inclusive) and builds the vocabulary from the survivors.
    pub fn from_lines<S: AsRef<str>>(lines: &[S], mode: TokenizerMode, bounds: (usize, usize)) -> Result<Self> {
        let kept: Vec<Vec<String>> = lines
            .iter()
            .map(|l| mode.split(l.as_ref()))
            .filter(|t| t.len() >= bounds.0 && t.len() <= bounds.1 && !t.is_empty())
            .collect();
        if kept.is_empty() {
            return Err(HarnessError::Input("no sentence survives the length bounds".into()));
        }
        let vocab = Vocabulary::build(kept.iter().flatten().map(String::as_str));
        Corpus::encode(&kept, vocab, mode)
    }

    /// Tokenises `lines` against an existing vocabulary.
    pub fn with_vocab<S: AsRef<str>>(
        lines: &[S],
        vocab: Vocabulary,
        mode: TokenizerMode,
        bounds: (usize, usize),
    ) -> Result<Self> {
        let kept: Vec<Vec<String>> = lines
            .iter()
            .map(|l| mode.split(l.as_ref()))
            .filter(|t| t.len() >= bounds.0 && t.len() <= bounds.1 && !t.is_empty())
            .collect();
        if kept.is_empty() {
            return Err(HarnessError::Input("no sentence survives the length bounds".into()));
        }
        Corpus::encode(&kept, vocab, mode)
    }

    fn encode(kept: &[Vec<String>], vocab: Vocabulary, mode: TokenizerMode) -> Result<Self> {
        let sentences = kept
            .iter()
            .map(|t| TokenSequence::new(t.iter().map(|w| vocab.id(w)).collect()))
            .collect::<nvib_model::Result<Vec<_>>>()?;
        Ok(Corpus { sentences, vocab, mode })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Histogram of encoder lengths (tokens plus the end marker).
    pub fn length_histogram(&self) -> LengthHistogram {
        LengthHistogram::from_lengths(self.sentences.iter().map(TokenSequence::len))
    }

    pub fn max_len(&self) -> usize {
        self.sentences.iter().map(TokenSequence::len).max().unwrap_or(0)
    }

    /// Text of decoded ids, cut at the end marker.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = strip_eos(ids).iter().map(|&i| self.vocab.token(i)).collect();
        self.mode.join(&words)
    }

    /// Splits off the last `fraction` of sentences as a held-out set.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let held = ((self.len() as f64 * fraction).round() as usize).min(self.len().saturating_sub(1));
        let cut = self.len() - held;
        let part = |s: &[TokenSequence]| Corpus { sentences: s.to_vec(), vocab: self.vocab.clone(), mode: self.mode };
        (part(&self.sentences[..cut]), part(&self.sentences[cut..]))
    }
}

/// Reads a UTF-8 file with one sentence per line.
pub fn ingest(path: &Path, mode: TokenizerMode, bounds: (usize, usize)) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Input(format!("cannot read {}: {e}", path.display())))?;
    let lines: Vec<&str> = text.lines().collect();
    Corpus::from_lines(&lines, mode, bounds)
}
