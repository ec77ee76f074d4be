//! Multimodal attributed graphs: the data model, synthetic generators,
//! masking, ego-subgraph batching and the on-disk format.

mod batch;
mod graph;
mod io;
mod mask;
mod synth;

use std::path::Path;

pub use batch::{sample_ego_batch, EgoBatch, EgoConfig};
pub use graph::{Labels, Modality, MultimodalGraph, Split};
pub use io::{graph_from_bytes, graph_to_bytes, load_graph, save_graph};
pub use mask::{apply_mask, MaskConfig, MaskPlan};
pub use synth::{gen_sbm_mag, gen_synergy_mag, SbmSpec, SynergyMode, SynergySpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{record}: {msg}")]
    Record { record: String, msg: String },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("cannot generate graph: {0}")]
    Generation(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}
