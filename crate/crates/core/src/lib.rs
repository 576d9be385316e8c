//! Desk-scale deep-learning library for pest-classification experiments.
//!
//! Everything runs on 64-bit floats with reverse-mode automatic
//! differentiation built from scratch, so analytic identities and
//! finite-difference oracles can verify each component without GPU-scale
//! training runs.

pub mod autodiff;
pub mod error;
pub mod params;
pub mod rng;
pub mod tensor;

pub use autodiff::{Mode, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
