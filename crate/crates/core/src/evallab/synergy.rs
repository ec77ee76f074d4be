//! Planted XOR synergy: a vanilla per-modality model against the full model
//! under the same budget, scored by a linear probe on frozen embeddings.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::magdata::{gen_synergy_mag, MultimodalGraph, SynergyMode, SynergySpec};
use crate::model::{ModelConfig, PlanetModel};
use crate::numerics::Seed;
use crate::trainer::{embed, node_classification_probe, pretrain, ProbeConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynergyConfig {
    pub data: SynergySpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Pass bounds: vanilla at most, full model at least, and the minimum gap.
    pub max_vanilla: f64,
    pub min_edg: f64,
    pub min_gap: f64,
}

impl Default for SynergyConfig {
    fn default() -> Self {
        Self {
            data: SynergySpec { num_nodes: 1000, edge_prob: 0.002, sigma: 0.1, unique_dims: (1, 1), mode: SynergyMode::Within },
            train: TrainConfig { epochs: 4, steps_per_epoch: 500, lr: 3e-3, ..TrainConfig::desk() },
            probe: ProbeConfig::default(),
            max_vanilla: 0.60,
            min_edg: 0.75,
            min_gap: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergyReport {
    pub seed: u64,
    pub acc_vanilla: f64,
    pub acc_edg: f64,
    pub train_acc_vanilla: f64,
    pub train_acc_edg: f64,
    pub final_loss_vanilla: f64,
    pub final_loss_edg: f64,
    pub pass: bool,
}

fn run(g: &MultimodalGraph, cfg: &SynergyConfig, use_edg: bool, seed: u64) -> Result<(f64, f64, f64), EvalError> {
    let model_cfg = ModelConfig { use_edg, ..ModelConfig::desk(g.modalities().to_vec(), g.anchor()) };
    let model = PlanetModel::new(model_cfg, Seed(seed).child("model", 0))?;
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let out = pretrain(&[g], model, &train)?;
    let final_loss = out.total_losses().last().copied().unwrap_or(f64::NAN);
    let emb = embed(&out.model, g)?;
    let probe = ProbeConfig { seed, ..cfg.probe };
    let report = node_classification_probe(&emb, g, &probe)?;
    Ok((report.test_accuracy, report.train_accuracy, final_loss))
}

pub fn synergy_experiment(seed: u64, cfg: &SynergyConfig) -> Result<SynergyReport, EvalError> {
    let g = gen_synergy_mag(&cfg.data, Seed(seed).child("data", 0))?;
    let (acc_vanilla, train_acc_vanilla, final_loss_vanilla) = run(&g, cfg, false, seed)?;
    let (acc_edg, train_acc_edg, final_loss_edg) = run(&g, cfg, true, seed)?;
    let pass = acc_vanilla <= cfg.max_vanilla && acc_edg >= cfg.min_edg && acc_edg - acc_vanilla >= cfg.min_gap;
    Ok(SynergyReport {
        seed,
        acc_vanilla,
        acc_edg,
        train_acc_vanilla,
        train_acc_edg,
        final_loss_vanilla,
        final_loss_edg,
        pass,
    })
}
