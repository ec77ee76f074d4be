//! Alignment terms: per-modality quantization residuals and the Wasserstein
//! distance between each modality's token distribution and the anchor's.

use serde::{Deserialize, Serialize};

use super::ot::{pushforward, wasserstein1};
use super::EvalError;
use crate::magdata::MultimodalGraph;
use crate::model::PlanetModel;
use crate::ndr::{nearest_tokens, quantization_residual};
use crate::numerics::Seed;
use crate::trainer::{pretrain, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityTerms {
    pub name: String,
    /// Mean `‖x − Q(x)‖₂` over nodes.
    pub residual: f64,
    /// W1 to the anchor's token distribution; `None` for the anchor itself.
    pub w1_to_anchor: Option<f64>,
    pub tokens_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub anchor: String,
    pub modalities: Vec<ModalityTerms>,
}

impl AlignmentReport {
    pub fn terms(&self, name: &str) -> Option<&ModalityTerms> {
        self.modalities.iter().find(|t| t.name == name)
    }

    /// Mean W1 over non-anchor modalities.
    pub fn mean_w1(&self) -> f64 {
        let w: Vec<f64> = self.modalities.iter().filter_map(|t| t.w1_to_anchor).collect();
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }

    pub fn mean_residual(&self) -> f64 {
        self.modalities.iter().map(|t| t.residual).sum::<f64>() / self.modalities.len().max(1) as f64
    }
}

/// Terms computed on the encoder outputs of one full-graph evaluation pass.
pub fn alignment_report(model: &PlanetModel, g: &MultimodalGraph) -> Result<AlignmentReport, EvalError> {
    model.check_schema(g)?;
    let (_, encoded) = model.infer(g.features(), &g.message_edges())?;
    let tokens = model.store.value(model.codebook.tokens);
    let anchor = g.anchor();
    let dists = encoded.iter().map(|h| pushforward(&nearest_tokens(tokens, h))).collect::<Result<Vec<_>, _>>()?;
    let mut modalities = Vec::with_capacity(encoded.len());
    for (m, h) in encoded.iter().enumerate() {
        let w1_to_anchor = if m == anchor { None } else { Some(wasserstein1(&dists[m], &dists[anchor], tokens)?) };
        modalities.push(ModalityTerms {
            name: g.modalities()[m].name.clone(),
            residual: quantization_residual(tokens, h),
            w1_to_anchor,
            tokens_used: dists[m].support.len(),
        });
    }
    Ok(AlignmentReport { anchor: g.modalities()[anchor].name.clone(), modalities })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentComparison {
    /// Trained with the configured alignment and VQ weights.
    pub aligned: AlignmentReport,
    /// Same seed and data with both weights set to zero.
    pub ablated: AlignmentReport,
}

impl AlignmentComparison {
    pub fn w1_improved(&self) -> bool {
        self.aligned.mean_w1() < self.ablated.mean_w1()
    }

    pub fn residual_improved(&self) -> bool {
        self.aligned.mean_residual() < self.ablated.mean_residual()
    }
}

/// Paired pre-training runs that differ only in the alignment and VQ loss weights.
pub fn alignment_ablation(
    g: &MultimodalGraph,
    model: &crate::model::ModelConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<AlignmentComparison, EvalError> {
    let run = |cfg: &TrainConfig| -> Result<AlignmentReport, EvalError> {
        let init = PlanetModel::new(model.clone(), Seed(seed))?;
        let out = pretrain(&[g], init, cfg)?;
        alignment_report(&out.model, g)
    };
    let aligned = run(train)?;
    let mut off = train.clone();
    off.weights.beta3 = 0.0;
    off.weights.beta4 = 0.0;
    let ablated = run(&off)?;
    Ok(AlignmentComparison { aligned, ablated })
}
