//! Evaluation-mode node embeddings.

use super::TrainError;
use crate::magdata::{sample_ego_batch, EgoConfig, MultimodalGraph};
use crate::model::PlanetModel;
use crate::numerics::{Seed, Tensor};

/// Embeddings of every node from one full-graph forward pass, `N × 2d|Ω|`.
pub fn embed(model: &PlanetModel, g: &MultimodalGraph) -> Result<Tensor, TrainError> {
    model.check_schema(g)?;
    Ok(model.infer(g.features(), &g.message_edges())?.0)
}

/// Embeddings computed `chunk` centers at a time on `hops`-hop ego subgraphs,
/// keeping only the center rows.
///
/// With `hops` at least the model depth every row matches [`embed`] up to
/// summation order.
pub fn embed_chunked(model: &PlanetModel, g: &MultimodalGraph, chunk: usize, hops: usize) -> Result<Tensor, TrainError> {
    model.check_schema(g)?;
    if chunk == 0 {
        return Err(TrainError::Config("chunk size must be at least 1".into()));
    }
    let cfg = EgoConfig { hops, edge_holdout_p: 0.0, sample_negatives: false };
    let width = model.config.embedding_dim();
    let mut out = Tensor::zeros(&[g.num_nodes(), width]);
    let nodes: Vec<usize> = (0..g.num_nodes()).collect();
    for centers in nodes.chunks(chunk) {
        let b = sample_ego_batch(g, centers, &cfg, Seed(0))?;
        let (h, _) = model.infer(&b.features, &b.message_edges)?;
        for (&c, &local) in centers.iter().zip(&b.centers) {
            out.row_mut(c).copy_from_slice(h.row(local));
        }
    }
    Ok(out)
}
