//! Evaluation experiments: few-shot prototypes, push-forward token
//! distributions with exact Wasserstein-1, alignment reports and the planted
//! synergy experiment.

mod align;
mod fewshot;
mod ot;
mod synergy;

pub use align::{alignment_ablation, alignment_report, AlignmentComparison, AlignmentReport, ModalityTerms};
pub use fewshot::{cosine, episode_accuracy, fewshot_eval, FewShotResult, FewShotTask};
pub use ot::{pushforward, transport, wasserstein1, DiscreteDistribution, TransportPlan};
pub use synergy::{synergy_experiment, SynergyConfig, SynergyReport};

use crate::encoder::ModelError;
use crate::magdata::DataError;
use crate::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("not enough data: {0}")]
    Insufficient(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Train(e.into())
    }
}

#[cfg(test)]
mod tests;
