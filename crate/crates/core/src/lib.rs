//! Nonparametric variational information bottleneck primitives.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense matrices, a per-pass reverse-mode tape, special
//!   functions and a seedable noise source.
//! * [`distributions`]: reparameterised Gaussian, Gamma and Dirichlet
//!   samplers plus the bounded factorised Dirichlet process.
//! * [`divergences`]: closed-form KL terms between posterior and
//!   (conditional) prior Dirichlet processes.
//! * [`attention`]: dot-product attention and its denoising generalisation
//!   over discrete and Gaussian mixtures.
//! * [`nvib`]: the bottleneck layer tying the pieces together.

pub mod attention;
pub mod distributions;
pub mod divergences;
pub mod error;
pub mod numerics;
pub mod nvib;

pub use error::{Error, Result};
pub use numerics::{Gradients, NoiseSource, Tape, Tensor, Var};
