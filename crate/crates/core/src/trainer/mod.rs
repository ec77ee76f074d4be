//! Self-supervised pre-training, embedding extraction, checkpoints and
//! frozen-backbone probes.

mod checkpoint;
mod embed;
mod probe;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ForwardCtx, ModelError};
use crate::magdata::{apply_mask, graph_to_bytes, sample_ego_batch, DataError, EgoConfig, MaskConfig, MultimodalGraph};
use crate::model::{ModelConfig, PlanetModel};
use crate::ndr::{codebook_report, CodebookReport};
use crate::numerics::{AdamW, AdamWConfig, NumericsError, Seed, Tape};
use crate::objective::{LossBreakdown, LossWeights};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint};
pub use embed::{embed, embed_chunked};
pub use probe::{
    accuracy, link_prediction_probe, macro_f1, mrr, node_classification_probe, train_classifier, Classifier,
    ClassificationReport, LinkReport, ProbeConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("{0}")]
    Missing(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(NumericsError::NonFinite(op)) => {
                TrainError::NonFinite { step: 0, detail: format!("produced by {op}") }
            }
            e => TrainError::Model(e),
        }
    }
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        ModelError::from(e).into()
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Centers per ego batch.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub mask: MaskConfig,
    pub ego: EgoConfig,
    /// Sampling weight per input graph; empty means uniform.
    pub dataset_weights: Vec<f64>,
    pub seed: u64,
    /// Log progress every this many steps (0 disables).
    pub log_every: usize,
    /// Seed the codebook from encoder outputs on the first batch.
    pub codebook_init: bool,
}

impl TrainConfig {
    /// Small-machine profile: 4 × 50 steps of 16 centers at lr 1e-3.
    pub fn desk() -> Self {
        Self {
            epochs: 4,
            steps_per_epoch: 50,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            mask: MaskConfig::default(),
            ego: EgoConfig::default(),
            dataset_weights: Vec::new(),
            seed: 0,
            log_every: 0,
            codebook_init: true,
        }
    }

    /// Full-scale pre-training schedule.
    pub fn full() -> Self {
        Self { epochs: 5, steps_per_epoch: 1000, batch_size: 128, lr: 4e-5, ..Self::desk() }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self, num_graphs: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad(format!("{} epochs of {} steps", self.epochs, self.steps_per_epoch));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("lr {} / weight_decay {}", self.lr, self.weight_decay));
        }
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if !self.dataset_weights.is_empty() {
            if self.dataset_weights.len() != num_graphs {
                return bad(format!("{} dataset weights for {num_graphs} graphs", self.dataset_weights.len()));
            }
            if self.dataset_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.dataset_weights.iter().sum::<f64>() <= 0.0 {
                return bad(format!("dataset weights {:?}", self.dataset_weights));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub graph: usize,
    pub losses: LossBreakdown,
    /// `|total − Σ weighted terms|` for this step.
    pub breakdown_gap: f64,
    /// Perplexity of this step's token assignments over all modalities.
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub codebook: CodebookReport,
    /// Mean routed fraction per expert, one row per gating bank.
    pub routing: Vec<Vec<f64>>,
}

pub struct TrainOutcome {
    pub model: PlanetModel,
    pub optimizer: AdamW,
    pub trace: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainOutcome {
    pub fn total_losses(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.losses.total).collect()
    }
}

fn mean_breakdown(steps: &[StepMetrics]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for s in steps {
        let l = &s.losses;
        m.l_s += l.l_s / n;
        m.l_c += l.l_c / n;
        m.l_feat += l.l_feat / n;
        m.l_topo += l.l_topo / n;
        m.l_gen += l.l_gen / n;
        m.l_vq += l.l_vq / n;
        m.l_load += l.l_load / n;
        m.total += l.total / n;
    }
    m
}

/// Pre-trains `model` on `graphs` by the masked multi-objective loss.
///
/// Step `s` draws its graph, centers, holdout, negatives, mask and dropout
/// from `Seed(cfg.seed).child("step", s)`, so a run is a pure function of
/// its inputs.
pub fn pretrain(graphs: &[&MultimodalGraph], mut model: PlanetModel, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if graphs.is_empty() {
        return Err(TrainError::Config("no training graphs".into()));
    }
    cfg.validate(graphs.len())?;
    for g in graphs {
        model.check_schema(g)?;
        if g.num_nodes() == 0 {
            return Err(TrainError::Config("empty training graph".into()));
        }
    }
    let weights = if cfg.dataset_weights.is_empty() { vec![1.0; graphs.len()] } else { cfg.dataset_weights.clone() };
    let picker = WeightedIndex::new(&weights).map_err(|e| TrainError::Config(format!("dataset weights: {e}")))?;
    let ego = cfg.ego;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &model.store);
    let root = Seed(cfg.seed);
    let banks = model.edg.as_ref().map_or(0, |e| e.layers.len() * model.config.modalities.len());

    let mut trace = Vec::with_capacity(cfg.total_steps());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        model.codebook.reset_usage();
        let mut routing = vec![vec![0.0; model.config.num_experts]; banks];
        let start = trace.len();
        for local in 0..cfg.steps_per_epoch {
            let step = epoch * cfg.steps_per_epoch + local;
            let seed = root.child("step", step as u64);
            let gi = picker.sample(&mut seed.stream("graph"));
            let g = graphs[gi];
            let take = cfg.batch_size.min(g.num_nodes());
            let centers = index::sample(&mut seed.stream("centers"), g.num_nodes(), take).into_vec();
            let batch = sample_ego_batch(g, &centers, &ego, seed)?;
            if step == 0 && cfg.codebook_init {
                model.init_codebook(&batch.features, &batch.message_edges)?;
            }
            let (plan, masked) = apply_mask(&batch.features, &cfg.mask, seed)?;

            let at_step = |e: TrainError| match e {
                TrainError::NonFinite { detail, .. } => TrainError::NonFinite {
                    step,
                    detail: format!("{detail}; graph {gi}, centers {centers:?}"),
                },
                e => e,
            };
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::train(&mut tape, &model.store, model.config.dropout, seed.stream("dropout"))
                .map_err(|e| at_step(e.into()))?;
            let out = model
                .loss(&mut tape, &mut ctx, &batch, &masked, &plan, &cfg.weights)
                .map_err(|e| at_step(e.into()))?;
            if !out.breakdown.total.is_finite() {
                return Err(at_step(TrainError::NonFinite { step, detail: format!("loss {:?}", out.breakdown) }));
            }
            let grads = tape.backward(out.total).map_err(|e| at_step(e.into()))?;
            model.store.zero_grad();
            tape.accumulate_param_grads(&grads, &mut model.store);
            if let Some((_, p)) = model.store.iter().find(|(_, p)| !p.grad.as_ref().is_some_and(|g| g.is_finite())) {
                return Err(at_step(TrainError::NonFinite { step, detail: format!("gradient of {}", p.name) }));
            }
            opt.step(&mut model.store)?;

            let mut usage = vec![0u64; model.config.codebook_size];
            for idx in &out.token_indices {
                model.codebook.record_usage(idx);
                idx.iter().for_each(|&i| usage[i] += 1);
            }
            for (acc, f) in routing.iter_mut().zip(&out.routing_fractions) {
                acc.iter_mut().zip(f).for_each(|(a, v)| *a += v / cfg.steps_per_epoch as f64);
            }
            let m = StepMetrics {
                step,
                epoch,
                graph: gi,
                losses: out.breakdown,
                breakdown_gap: (out.breakdown.total - out.breakdown.recompute(&cfg.weights)).abs(),
                perplexity: codebook_report(&usage).perplexity,
            };
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log::info!("step {step} epoch {epoch} total {:.6} perplexity {:.2}", m.losses.total, m.perplexity);
            }
            trace.push(m);
        }
        epochs.push(EpochSummary {
            epoch,
            mean: mean_breakdown(&trace[start..]),
            codebook: model.codebook.report(),
            routing,
        });
    }
    Ok(TrainOutcome { model, optimizer: opt, trace, epochs })
}

pub const METRICS_HEADER: &str = "step,epoch,L_s,L_c,L_topo,L_gen,L_VQ,L_load,total,perplexity";

/// The per-step trace as CSV under [`METRICS_HEADER`].
pub fn metrics_csv(trace: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in trace {
        let l = &m.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            m.step, m.epoch, l.l_s, l.l_c, l.l_topo, l.l_gen, l.l_vq, l.l_load, l.total, m.perplexity
        );
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a graph's serialized file form.
pub fn graph_hash(g: &MultimodalGraph) -> String {
    sha256_hex(&graph_to_bytes(g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// The configuration text the run was launched with, verbatim.
    pub config_text: Option<String>,
    pub data_hashes: Vec<String>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoint_sha256: String,
}

/// Paths written by [`write_run`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub manifest: PathBuf,
}

/// Writes the checkpoint, metrics and manifest of a finished run into `dir`.
pub fn write_run(
    dir: &Path,
    outcome: &TrainOutcome,
    cfg: &TrainConfig,
    graphs: &[&MultimodalGraph],
    config_text: Option<String>,
) -> Result<(RunManifest, RunFiles), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let files = RunFiles {
        checkpoint: dir.join("checkpoint.plnt"),
        metrics_csv: dir.join("metrics.csv"),
        metrics_json: dir.join("metrics.json"),
        manifest: dir.join("manifest.json"),
    };
    let bytes = checkpoint_bytes(&outcome.model, Some(&outcome.optimizer));
    std::fs::write(&files.checkpoint, &bytes).map_err(|e| io_err(&files.checkpoint, e))?;
    std::fs::write(&files.metrics_csv, metrics_csv(&outcome.trace)).map_err(|e| io_err(&files.metrics_csv, e))?;
    let json = serde_json::json!({ "steps": outcome.trace, "epochs": outcome.epochs });
    write_json(&files.metrics_json, &json)?;
    let manifest = RunManifest {
        seed: cfg.seed,
        model: outcome.model.config.clone(),
        train: cfg.clone(),
        config_text,
        data_hashes: graphs.iter().map(|g| graph_hash(g)).collect(),
        epochs: outcome.epochs.clone(),
        checkpoint_sha256: sha256_hex(&bytes),
    };
    write_json(&files.manifest, &manifest)?;
    Ok((manifest, files))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}
