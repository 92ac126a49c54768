//! Dense numerics: tensors, the autodiff tape, special functions, noise.

pub mod gradcheck;
pub mod noise;
pub mod param;
pub mod special;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use noise::NoiseSource;
pub use param::{Bound, Linear, ParamId, Params};
pub use special::{digamma, log_gamma, trigamma};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
