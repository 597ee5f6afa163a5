//! Pair-adversarial multi-view generative models.

pub mod autodiff;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{grad_check, BnMode, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
