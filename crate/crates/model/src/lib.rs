//! Toy Transformer autoencoders whose cross-attention interface is a
//! Dirichlet-process latent (NVAE) or one of the Gaussian VIB baselines.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod layers;
pub mod lm;
pub mod model;
pub mod optim;
pub mod sequence;
pub mod train;

pub use config::{ModelConfig, Pooling, Variant};
pub use error::{ModelError, Result};
pub use latent::Latent;
pub use lm::{perplexity, LanguageModel, TokenScorer, UniformScorer};
pub use model::{Autoencoder, EvalStats, LossRecord};
pub use sequence::{LengthHistogram, TokenSequence};
pub use train::{TrainConfig, Trainer};
