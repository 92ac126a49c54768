use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nvib_core::nvib::NvibConfig;

use crate::error::{ModelError, Result};

/// How VTP reduces encoder states to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
    /// The first encoder state.
    Cls,
}

/// Latent interface between encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// Plain cross-attention over encoder states.
    T,
    /// Independent Gaussian VIB on every state.
    Vt,
    /// Gaussian VIB on one pooled vector.
    Vtp(Pooling),
    /// Gaussian VIB on evenly spaced states; a fraction `stride` is masked.
    Vts(f64),
    /// Dirichlet-process latent.
    Nvae,
}

impl Variant {
    pub fn has_prior(&self) -> bool {
        !matches!(self, Variant::T)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::T => write!(f, "T"),
            Variant::Vt => write!(f, "VT"),
            Variant::Vtp(Pooling::Mean) => write!(f, "VTP-mean"),
            Variant::Vtp(Pooling::Max) => write!(f, "VTP-max"),
            Variant::Vtp(Pooling::Cls) => write!(f, "VTP-cls"),
            Variant::Vts(s) => write!(f, "VTS-{s}"),
            Variant::Nvae => write!(f, "NVAE"),
        }
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let v = match lower.as_str() {
            "t" => Variant::T,
            "vt" => Variant::Vt,
            "vtp" | "vtp-mean" => Variant::Vtp(Pooling::Mean),
            "vtp-max" => Variant::Vtp(Pooling::Max),
            "vtp-cls" => Variant::Vtp(Pooling::Cls),
            "vts" => Variant::Vts(0.5),
            "nvae" => Variant::Nvae,
            other => match other.strip_prefix("vts-") {
                Some(stride) => Variant::Vts(
                    stride.parse().map_err(|_| ModelError::Config(format!("bad VTS stride in {s:?}")))?,
                ),
                None => return Err(ModelError::Config(format!("unknown variant {s:?}"))),
            },
        };
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub nvib: NvibConfig,
    pub dropout: f64,
    /// Initial bias of the pseudo-count projection.
    pub alpha_init: f64,
}

impl ModelConfig {
    /// Toy defaults: `d = 32`, feed-forward 64.
    pub fn toy(vocab_size: usize, max_len: usize, variant: Variant) -> Self {
        ModelConfig {
            vocab_size,
            model_dim: 32,
            ff_dim: 64,
            max_len,
            variant,
            nvib: NvibConfig::default(),
            dropout: 0.1,
            alpha_init: 1.0,
        }
    }

    /// Larger preset: d = 256, feed-forward 256.
    pub fn full_scale(vocab_size: usize, max_len: usize, variant: Variant) -> Self {
        ModelConfig { model_dim: 256, ff_dim: 256, ..ModelConfig::toy(vocab_size, max_len, variant) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim < 4 || !self.model_dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!("model_dim must be even and at least 4, got {}", self.model_dim)));
        }
        if self.ff_dim == 0 || self.max_len == 0 {
            return Err(ModelError::Config("ff_dim and max_len must be positive".into()));
        }
        if self.vocab_size <= crate::sequence::SPECIAL_TOKENS {
            return Err(ModelError::Config("vocabulary has no ordinary tokens".into()));
        }
        if let Variant::Vts(s) = self.variant {
            if !(s > 0.0 && s < 1.0) {
                return Err(ModelError::Config(format!("VTS stride must lie in (0, 1), got {s}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.nvib.validate()?;
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("vocab_size".into(), self.vocab_size.to_string());
        m.insert("model_dim".into(), self.model_dim.to_string());
        m.insert("ff_dim".into(), self.ff_dim.to_string());
        m.insert("max_len".into(), self.max_len.to_string());
        m.insert("variant".into(), self.variant.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("alpha_init".into(), self.alpha_init.to_string());
        m.insert("lambda_d_prime".into(), self.nvib.lambda_d_prime.to_string());
        m.insert("lambda_g_prime".into(), self.nvib.lambda_g_prime.to_string());
        m.insert("delta_p".into(), self.nvib.delta_p.to_string());
        m.insert("alpha0_p".into(), self.nvib.alpha0_p.to_string());
        m.insert("conditional_prior".into(), self.nvib.conditional_prior.to_string());
        m
    }

    pub fn from_pairs(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = m.get(key).ok_or_else(|| ModelError::Config(format!("missing key {key}")))?;
            raw.parse().map_err(|_| ModelError::Config(format!("bad value {raw:?} for {key}")))
        }
        let cfg = ModelConfig {
            vocab_size: get(m, "vocab_size")?,
            model_dim: get(m, "model_dim")?,
            ff_dim: get(m, "ff_dim")?,
            max_len: get(m, "max_len")?,
            variant: get(m, "variant")?,
            dropout: get(m, "dropout")?,
            alpha_init: get(m, "alpha_init")?,
            nvib: NvibConfig {
                lambda_d_prime: get(m, "lambda_d_prime")?,
                lambda_g_prime: get(m, "lambda_g_prime")?,
                delta_p: get(m, "delta_p")?,
                alpha0_p: get(m, "alpha0_p")?,
                conditional_prior: get(m, "conditional_prior")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
