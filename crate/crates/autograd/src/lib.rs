//! Minimal reverse-mode automatic differentiation for small dense models.
//!
//! Everything is `f64` and single-threaded, so a computation repeated with
//! the same inputs reproduces its results bit for bit.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, WeightDecayMode};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutogradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("no parameter named `{0}`")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
