//! The complete model: per-modality encoders, modality gating, the shared
//! codebook, fusion and the pre-training decoders.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::edg::{routing_stats, EdgShape, EdgStack, Mixture};
use crate::encoder::{ForwardCtx, ModalityBranch, ModelError};
use crate::magdata::{EgoBatch, MaskPlan, Modality, MultimodalGraph};
use crate::ndr::{general_knowledge_loss, vq_loss, Codebook, QuantizeResult};
use crate::numerics::{MessageEdges, ParamStore, Seed, Tape, Tensor, Var};
use crate::objective::{
    cross_recon_loss, fuse, fuse_node, load_balance_loss, self_recon_loss, topo_loss, total_loss, DecoderSet,
    LossBreakdown, LossTerms, LossWeights,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub anchor: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub k_top: usize,
    pub codebook_size: usize,
    pub tau: f64,
    pub gamma: f64,
    pub dropout: f64,
    /// `false` builds the ablation without modality gating: the quantiser
    /// reads each modality's own specific-branch output.
    pub use_edg: bool,
    /// Restrict the reconstruction losses to masked nodes.
    pub masked_only_recon: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for a graph's schema.
    pub fn desk(modalities: Vec<Modality>, anchor: usize) -> Self {
        Self {
            modalities,
            anchor,
            dim: 32,
            heads: 4,
            num_layers: 2,
            num_experts: 3,
            k_top: 2,
            codebook_size: 64,
            tau: 0.93,
            gamma: 0.25,
            dropout: 0.1,
            use_edg: true,
            masked_only_recon: false,
        }
    }

    /// Full-scale sizes.
    pub fn full(modalities: Vec<Modality>, anchor: usize) -> Self {
        Self {
            dim: 768,
            heads: 8,
            num_layers: 8,
            num_experts: 5,
            k_top: 2,
            codebook_size: 20480,
            ..Self::desk(modalities, anchor)
        }
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.dim * self.modalities.len()
    }
}

/// Every tape value produced by one forward pass.
pub struct ForwardOut {
    pub h0: Vec<Var>,
    pub specific: Vec<Var>,
    /// `H^(L,m)`: what the quantiser reads.
    pub encoded: Vec<Var>,
    pub quantized: Vec<QuantizeResult>,
    pub fused: Vec<Var>,
    pub mixtures: Vec<Mixture>,
}

/// Losses and bookkeeping of one training step.
pub struct StepOut {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub token_indices: Vec<Vec<usize>>,
    pub routing_fractions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PlanetModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub branches: Vec<ModalityBranch>,
    pub edg: Option<EdgStack>,
    pub codebook: Codebook,
    pub decoders: DecoderSet,
}

impl PlanetModel {
    pub fn new(config: ModelConfig, seed: Seed) -> Result<Self, ModelError> {
        let k = config.modalities.len();
        if k < 2 {
            return Err(ModelError::Config("the model needs at least two modalities".into()));
        }
        if config.anchor >= k {
            return Err(ModelError::Config(format!("anchor {} with {k} modalities", config.anchor)));
        }
        if config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0 {
            return Err(ModelError::Config(format!("{} heads and hidden size {}", config.heads, config.dim)));
        }
        let mut rng = seed.stream("init");
        let mut store = ParamStore::new();
        let branches = config
            .modalities
            .iter()
            .map(|m| {
                ModalityBranch::new(&mut store, &format!("branch/{}", m.name), m.dim, config.dim, config.heads, config.num_layers, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let edg = if config.use_edg {
            let shape = EdgShape {
                num_modalities: k,
                dim: config.dim,
                heads: config.heads,
                num_layers: config.num_layers,
                num_experts: config.num_experts,
                k_top: config.k_top,
            };
            Some(EdgStack::new(&mut store, "edg", shape, &mut rng)?)
        } else {
            None
        };
        let codebook = Codebook::new(&mut store, "codebook", config.codebook_size, config.dim, config.tau, config.gamma, &mut rng)?;
        let dims: Vec<usize> = config.modalities.iter().map(|m| m.dim).collect();
        let decoders = DecoderSet::new(&mut store, "dec", config.dim, &dims, &mut rng)?;
        Ok(Self { config, store, branches, edg, codebook, decoders })
    }

    pub fn check_schema(&self, g: &MultimodalGraph) -> Result<(), ModelError> {
        if g.modalities() != self.config.modalities.as_slice() || g.anchor() != self.config.anchor {
            return Err(ModelError::Contract(format!(
                "graph schema {:?} (anchor {}) does not match model schema {:?} (anchor {})",
                g.modalities(),
                g.anchor(),
                self.config.modalities,
                self.config.anchor
            )));
        }
        Ok(())
    }

    pub fn branch(&self, m: usize) -> Result<&ModalityBranch, ModelError> {
        self.branches.get(m).ok_or(ModelError::UnknownModality(m))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        features: &[Var],
        edges: &Arc<MessageEdges>,
    ) -> Result<ForwardOut, ModelError> {
        if features.len() != self.branches.len() {
            return Err(ModelError::Contract(format!("{} feature matrices for {} modalities", features.len(), self.branches.len())));
        }
        let mut h0 = Vec::new();
        let mut specific = Vec::new();
        for (m, &x) in features.iter().enumerate() {
            let b = self.branch(m)?;
            let h = b.project(tape, ctx, x)?;
            specific.push(b.specific(tape, ctx, h, edges)?);
            h0.push(h);
        }
        let (encoded, mixtures) = match &self.edg {
            Some(stack) => {
                let out = stack.forward(tape, ctx, &h0, edges)?;
                (out.states, out.mixtures)
            }
            None => (specific.clone(), Vec::new()),
        };
        let mut quantized = Vec::new();
        let mut fused = Vec::new();
        for (m, &h) in encoded.iter().enumerate() {
            let q = self.codebook.quantize(tape, ctx, h)?;
            fused.push(fuse(tape, specific[m], q.quantized)?);
            quantized.push(q);
        }
        Ok(ForwardOut { h0, specific, encoded, quantized, fused, mixtures })
    }

    /// All pre-training losses on one masked ego batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        batch: &EgoBatch,
        masked: &[Tensor],
        plan: &MaskPlan,
        weights: &LossWeights,
    ) -> Result<StepOut, ModelError> {
        let inputs = masked.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let targets = plan.targets.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = self.forward(tape, ctx, &inputs, &batch.message_edges)?;
        let rows = self.config.masked_only_recon.then_some(plan.nodes.as_slice());
        let l_s = self_recon_loss(tape, ctx, &self.decoders, &out.fused, &targets, rows)?;
        let l_c = cross_recon_loss(tape, ctx, &self.decoders, &out.fused, &targets, rows)?;
        let l_topo = topo_loss(tape, ctx, &self.decoders, &out.fused, &batch.positives, &batch.negatives)?;
        let q: Vec<Var> = out.quantized.iter().map(|r| r.quantized).collect();
        let l_gen = general_knowledge_loss(tape, &q, self.config.anchor, self.config.tau)?;
        let l_vq = vq_loss(tape, &out.encoded, &out.quantized, self.config.gamma)?;
        let stats = out.mixtures.iter().map(|m| routing_stats(tape, m)).collect::<Result<Vec<_>, _>>()?;
        let l_load = load_balance_loss(tape, &stats)?;
        let terms = LossTerms { l_s, l_c, l_topo, l_gen, l_vq, l_load };
        let (total, breakdown) = total_loss(tape, weights, &terms)?;
        Ok(StepOut {
            total,
            breakdown,
            token_indices: out.quantized.iter().map(|r| r.indices.clone()).collect(),
            routing_fractions: stats.into_iter().map(|s| s.fractions).collect(),
        })
    }

    /// Evaluation-mode forward over the given features and edges; returns
    /// the fused node embeddings and each modality's `H^(L,m)`.
    pub fn infer(&self, features: &[Tensor], edges: &Arc<MessageEdges>) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape, &self.store)?;
        let inputs = features.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = self.forward(&mut tape, &mut ctx, &inputs, edges)?;
        let h = fuse_node(&mut tape, &out.fused)?;
        let encoded = out.encoded.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(h).clone(), encoded))
    }

    /// Replaces codebook tokens with encoder outputs, node-major across modalities.
    pub fn init_codebook(&mut self, features: &[Tensor], edges: &Arc<MessageEdges>) -> Result<usize, ModelError> {
        let (_, encoded) = self.infer(features, edges)?;
        let n = encoded.first().map_or(0, Tensor::rows);
        let rows: Vec<Vec<f64>> = (0..n).flat_map(|i| encoded.iter().map(move |e| e.row(i).to_vec())).collect();
        self.codebook.init_from_rows(&mut self.store, &rows)
    }
}
