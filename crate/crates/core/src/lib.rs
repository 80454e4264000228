//! Multi-head attention with interchangeable QKV projections (linear, dual
//! linear, and MLP), built on a small reverse-mode autodiff engine, plus the
//! models, synthetic data, training loop, and metrics used to compare them.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Result, TensorError};
pub use rng::Rng;
pub use tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
