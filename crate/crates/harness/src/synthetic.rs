//! Synthetic sentences from a sparse first-order Markov chain.

use nvib_core::NoiseSource;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkovSpec {
    pub vocab: usize,
    /// Successors reachable from each word.
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sentences: usize,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        MarkovSpec { vocab: 64, branching: 4, min_len: 5, max_len: 20, sentences: 512 }
    }
}

pub fn word(i: usize) -> String {
    format!("w{i:02}")
}

/// Whitespace-separated sentences; lengths are uniform on
/// `[min_len, max_len]` and every word of the vocabulary is used.
pub fn markov_corpus(spec: &MarkovSpec, seed: u64) -> Vec<String> {
    let mut noise = NoiseSource::new(seed);
    let successors: Vec<Vec<usize>> =
        (0..spec.vocab).map(|_| (0..spec.branching).map(|_| noise.below(spec.vocab)).collect()).collect();
    let mut lines = Vec::with_capacity(spec.sentences);
    for s in 0..spec.sentences {
        let len = spec.min_len + noise.below(spec.max_len - spec.min_len + 1);
        // Cycling the start word guarantees full vocabulary coverage.
        let mut w = if s < spec.vocab { s } else { noise.below(spec.vocab) };
        let mut words = vec![word(w)];
        while words.len() < len {
            w = successors[w][noise.below(spec.branching)];
            words.push(word(w));
        }
        lines.push(words.join(" "));
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn lengths_and_coverage() {
        let spec = MarkovSpec::default();
        let lines = markov_corpus(&spec, 3);
        assert_eq!(lines.len(), 512);
        let mut seen = HashSet::new();
        for l in &lines {
            let w: Vec<&str> = l.split(' ').collect();
            assert!((5..=20).contains(&w.len()));
            seen.extend(w.into_iter().map(String::from));
        }
        assert_eq!(seen.len(), 64);
        assert_eq!(markov_corpus(&spec, 3), lines);
    }
}
