//! Dense tensors, reverse-mode differentiation, AdamW and checkpoint IO.

pub mod checkpoint;
mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{Seed, StreamRng};
pub use tape::{FrozenLog, Gradients, MessageEdges, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("contract violated: {0}")]
    Contract(&'static str),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("tensor bundle format error: {0}")]
    Format(String),
}
