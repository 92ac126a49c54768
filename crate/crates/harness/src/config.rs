//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys:
//!
//! | key | default |
//! |---|---|
//! | `variant` | `NVAE` |
//! | `lambda_d_prime`, `lambda_g_prime` | `1`, `0.1` |
//! | `delta_p`, `alpha0_p` | `0.2`, `1` |
//! | `seed` | `7` |
//! | `model_dim`, `ff_dim` | `32`, `64` |
//! | `dropout`, `alpha_init` | `0.1`, `1` |
//! | `steps`, `batch_size`, `lr`, `clip` | `4000`, `16`, `0.0005`, `0.1` |
//! | `log_every` | `250` |
//! | `data` | unset: synthetic Markov corpus |
//! | `tokenizer` | `whitespace` |
//! | `min_tokens`, `max_tokens` | `1`, `64` |
//! | `validation_fraction` | `0.1` |
//! | `samples` | `1000` |
//! | `lm_steps` | `1500` |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nvib_model::{ModelConfig, TrainConfig, Variant};

use crate::corpus::TokenizerMode;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub lambda_d_prime: f64,
    pub lambda_g_prime: f64,
    pub delta_p: f64,
    pub alpha0_p: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub alpha_init: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub log_every: usize,
    pub data: Option<PathBuf>,
    pub tokenizer: TokenizerMode,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub validation_fraction: f64,
    pub samples: usize,
    pub lm_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Nvae,
            lambda_d_prime: 1.0,
            lambda_g_prime: 0.1,
            delta_p: 0.2,
            alpha0_p: 1.0,
            seed: 7,
            model_dim: 32,
            ff_dim: 64,
            dropout: 0.1,
            alpha_init: 1.0,
            steps: 4000,
            batch_size: 16,
            lr: 5e-4,
            clip: 0.1,
            log_every: 250,
            data: None,
            tokenizer: TokenizerMode::Whitespace,
            min_tokens: 1,
            max_tokens: 64,
            validation_fraction: 0.1,
            samples: 1000,
            lm_steps: 1500,
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| HarnessError::Input(format!("bad value {raw:?} for {key}")))
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "variant" => {
                self.variant = raw.parse().map_err(|e: nvib_model::ModelError| HarnessError::Input(e.to_string()))?
            }
            "lambda_d_prime" => self.lambda_d_prime = parse(key, raw)?,
            "lambda_g_prime" => self.lambda_g_prime = parse(key, raw)?,
            "delta_p" => self.delta_p = parse(key, raw)?,
            "alpha0_p" => self.alpha0_p = parse(key, raw)?,
            "seed" => self.seed = parse(key, raw)?,
            "model_dim" => self.model_dim = parse(key, raw)?,
            "ff_dim" => self.ff_dim = parse(key, raw)?,
            "dropout" => self.dropout = parse(key, raw)?,
            "alpha_init" => self.alpha_init = parse(key, raw)?,
            "steps" => self.steps = parse(key, raw)?,
            "batch_size" => self.batch_size = parse(key, raw)?,
            "lr" => self.lr = parse(key, raw)?,
            "clip" => self.clip = parse(key, raw)?,
            "log_every" => self.log_every = parse(key, raw)?,
            "data" => self.data = Some(PathBuf::from(raw)),
            "tokenizer" => self.tokenizer = parse(key, raw)?,
            "min_tokens" => self.min_tokens = parse(key, raw)?,
            "max_tokens" => self.max_tokens = parse(key, raw)?,
            "validation_fraction" => self.validation_fraction = parse(key, raw)?,
            "samples" => self.samples = parse(key, raw)?,
            "lm_steps" => self.lm_steps = parse(key, raw)?,
            other => return Err(HarnessError::Input(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Input(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Input(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(HarnessError::Input("steps, batch_size and log_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip > 0.0) {
            return Err(HarnessError::Input("lr and clip must be positive".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(HarnessError::Input("token bounds must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(HarnessError::Input("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, max_len: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::toy(vocab_size, max_len, self.variant);
        m.model_dim = self.model_dim;
        m.ff_dim = self.ff_dim;
        m.dropout = self.dropout;
        m.alpha_init = self.alpha_init;
        m.nvib.lambda_d_prime = self.lambda_d_prime;
        m.nvib.lambda_g_prime = self.lambda_g_prime;
        m.nvib.delta_p = self.delta_p;
        m.nvib.alpha0_p = self.alpha0_p;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { batch_size: self.batch_size, lr: self.lr, clip: Some(self.clip) }
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("variant", self.variant.to_string());
        put("lambda_d_prime", self.lambda_d_prime.to_string());
        put("lambda_g_prime", self.lambda_g_prime.to_string());
        put("delta_p", self.delta_p.to_string());
        put("alpha0_p", self.alpha0_p.to_string());
        put("seed", self.seed.to_string());
        put("model_dim", self.model_dim.to_string());
        put("ff_dim", self.ff_dim.to_string());
        put("dropout", self.dropout.to_string());
        put("alpha_init", self.alpha_init.to_string());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("clip", self.clip.to_string());
        put("log_every", self.log_every.to_string());
        if let Some(d) = &self.data {
            put("data", d.display().to_string());
        }
        put("tokenizer", self.tokenizer.to_string());
        put("min_tokens", self.min_tokens.to_string());
        put("max_tokens", self.max_tokens.to_string());
        put("validation_fraction", self.validation_fraction.to_string());
        put("samples", self.samples.to_string());
        put("lm_steps", self.lm_steps.to_string());
        m
    }

    pub fn from_pairs(m: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in m {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_file() {
        let cfg = RunConfig::parse_str("# run\nvariant = VTS-0.25\nlambda_g_prime=0.01\n\nseed = 3\n").unwrap();
        assert_eq!(cfg.variant, Variant::Vts(0.25));
        assert_eq!(cfg.lambda_g_prime, 0.01);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.steps, RunConfig::default().steps);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(RunConfig::parse_str("colour = red").is_err());
        assert!(RunConfig::parse_str("seed 3").is_err());
        assert!(RunConfig::parse_str("seed = x").is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let cfg = RunConfig { data: Some("a/b.txt".into()), variant: Variant::Vt, ..RunConfig::default() };
        assert_eq!(RunConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    }
}
