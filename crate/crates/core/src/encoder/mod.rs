//! Dimension alignment, the graph transformer layer and modality-specific branches.

mod branch;
mod gt;
mod layers;

pub use branch::ModalityBranch;
pub use gt::{GraphTransformerLayer, LayerOutput};
pub use layers::{ForwardCtx, Linear, Mlp};

use crate::numerics::NumericsError;

/// Errors raised while building or running model components.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("unregistered modality {0}")]
    UnknownModality(usize),
}
