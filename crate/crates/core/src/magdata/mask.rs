//! Hierarchical feature masking: node, then modality, then dimension.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numerics::{Seed, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub node_p: f64,
    pub modality_p: f64,
    pub dim_p: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { node_p: 0.6, modality_p: 0.4, dim_p: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Nodes drawn for masking, ascending.
    pub nodes: Vec<usize>,
    /// Keep-mask (`true` = kept) per masked (node, modality) slot.
    pub slots: BTreeMap<(usize, usize), Vec<bool>>,
    /// Unmasked features, the reconstruction targets.
    pub targets: Vec<Tensor>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Whether every dimension of the slot was zeroed.
    pub fn fully_masked(&self, node: usize, modality: usize) -> bool {
        self.slots.get(&(node, modality)).is_some_and(|b| b.iter().all(|k| !k))
    }
}

/// Draws a mask plan over `features` and returns it with the masked view.
pub fn apply_mask(features: &[Tensor], cfg: &MaskConfig, seed: Seed) -> Result<(MaskPlan, Vec<Tensor>), DataError> {
    for (name, p) in [("node_p", cfg.node_p), ("modality_p", cfg.modality_p), ("dim_p", cfg.dim_p)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(DataError::Contract(format!("{name} = {p} is not a probability")));
        }
    }
    let n = features.first().map_or(0, Tensor::rows);
    let mut rng = seed.stream("mask");
    let mut plan = MaskPlan { nodes: Vec::new(), slots: BTreeMap::new(), targets: features.to_vec() };
    let mut view = features.to_vec();
    for i in 0..n {
        if !rng.random_bool(cfg.node_p) {
            continue;
        }
        plan.nodes.push(i);
        for (m, x) in view.iter_mut().enumerate() {
            if !rng.random_bool(cfg.modality_p) {
                continue;
            }
            let keep: Vec<bool> = (0..x.cols()).map(|_| !rng.random_bool(cfg.dim_p)).collect();
            for (v, &k) in x.row_mut(i).iter_mut().zip(&keep) {
                if !k {
                    *v = 0.0;
                }
            }
            plan.slots.insert((i, m), keep);
        }
    }
    Ok((plan, view))
}
