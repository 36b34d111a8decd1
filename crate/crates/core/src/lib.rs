//! Sequential recommendation with a TTT-Linear sequence encoder.
//!
//! The hidden state of the encoder is the weight matrix of a linear model that
//! is trained on the fly, one gradient step per clicked item. Outer training
//! differentiates through those steps with the small reverse-mode engine in
//! [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod ttt;

pub use autodiff::{grad_check, NodeId, Trace};
pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::{Real, Tensor};
