//! Embedding-wise domain gating: a mixture of experts distils the other
//! modalities' states into a cross-modal signal, which a graph transformer
//! layer then attends over.

use std::sync::Arc;

use crate::encoder::{ForwardCtx, GraphTransformerLayer, Linear, Mlp, ModelError};
use crate::numerics::{MessageEdges, ParamStore, StreamRng, Tape, Tensor, Var};

/// Experts `E_k: (|Ω|−1)·d → d` and a linear softmax gate.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<Mlp>,
    pub gate: Linear,
    pub k_top: usize,
}

/// Mixture output for one bank over a batch of complements.
#[derive(Clone, Debug)]
pub struct Mixture {
    /// `e_j`, one row per node.
    pub e: Var,
    /// Gate weights after truncation and renormalisation.
    pub weights: Var,
    /// Full softmax over all experts, before truncation.
    pub probs: Var,
    /// Top-1 expert per row, lowest index on ties.
    pub top1: Vec<usize>,
}

/// Load-balancing inputs: `f_k` (fraction routed to `k`) and `P_k` (mean probability).
#[derive(Clone, Debug)]
pub struct RoutingStats {
    pub fractions: Vec<f64>,
    pub mean_probs: Var,
}

/// Indices of the `k` largest entries of `row`, lowest index first among equals.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl ExpertBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        dim: usize,
        num_experts: usize,
        k_top: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, ModelError> {
        if k_top < 1 || k_top > num_experts {
            return Err(ModelError::Config(format!("top-k {k_top} with {num_experts} experts")));
        }
        let experts = (0..num_experts)
            .map(|k| Mlp::new(store, &format!("{name}/expert{k}"), in_dim, dim, dim, rng))
            .collect::<Result<_, _>>()?;
        let gate = Linear::new(store, &format!("{name}/gate"), in_dim, num_experts, rng)?;
        Ok(Self { experts, gate, k_top })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `e_j = Σ_k G(n_j)_k · E_k(n_j)` with the gate truncated to the top `k_top` logits.
    pub fn mix(&self, tape: &mut Tape, ctx: &ForwardCtx, n: Var) -> Result<Mixture, ModelError> {
        let k = self.num_experts();
        let logits = self.gate.forward(tape, ctx, n)?;
        let probs = tape.softmax(logits, 1)?;
        let weights = if self.k_top == k {
            probs
        } else {
            let k_top = self.k_top;
            let chosen = tape.choose(|t| {
                let l = t.value(logits);
                (0..l.rows()).flat_map(|i| top_k(l.row(i), k_top)).collect()
            })?;
            let rows = tape.value(logits).rows();
            let mut keep = vec![false; rows * k];
            for (r, sel) in chosen.chunks(k_top).enumerate() {
                sel.iter().for_each(|&j| keep[r * k + j] = true);
            }
            tape.masked_softmax(logits, &keep)?
        };
        let top1 = tape.choose(|t| {
            let l = t.value(logits);
            (0..l.rows()).map(|i| top_k(l.row(i), 1)[0]).collect()
        })?;
        let mut e = None;
        for (j, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(tape, ctx, n)?;
            let g = tape.slice_cols(weights, j, 1)?;
            let term = tape.mul_col(out, g)?;
            e = Some(match e {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let e = e.ok_or_else(|| ModelError::Config("expert bank without experts".into()))?;
        Ok(Mixture { e, weights, probs, top1 })
    }
}

/// `f_k` from top-1 assignments and `P_k` as the batch mean of the full softmax.
pub fn routing_stats(tape: &mut Tape, mix: &Mixture) -> Result<RoutingStats, ModelError> {
    let (n, k) = tape.value(mix.probs).dims2();
    if n == 0 {
        return Err(ModelError::Contract("routing statistics of an empty batch".into()));
    }
    let mut counts = vec![0usize; k];
    mix.top1.iter().for_each(|&j| counts[j] += 1);
    let fractions = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let mean_probs = tape.mean_rows(mix.probs)?;
    Ok(RoutingStats { fractions, mean_probs })
}

/// `n_j^(m)`: the other modalities' states concatenated in registration order.
pub fn build_complement(tape: &mut Tape, states: &[Var], target: usize) -> Result<Var, ModelError> {
    if states.len() < 2 {
        return Err(ModelError::Contract("modality gating needs at least two modalities".into()));
    }
    if target >= states.len() {
        return Err(ModelError::UnknownModality(target));
    }
    let others: Vec<Var> = states.iter().enumerate().filter(|&(m, _)| m != target).map(|(_, &v)| v).collect();
    Ok(tape.concat_cols(&others)?)
}

#[derive(Clone, Debug)]
pub struct EdgLayer {
    pub banks: Vec<ExpertBank>,
    pub attention: Vec<GraphTransformerLayer>,
}

/// `L` gating layers; every layer advances all modalities together.
#[derive(Clone, Debug)]
pub struct EdgStack {
    pub layers: Vec<EdgLayer>,
    pub num_modalities: usize,
}

#[derive(Clone, Debug)]
pub struct EdgOutput {
    /// Final states `H^(L,m)`, one per modality.
    pub states: Vec<Var>,
    /// Mixtures in layer-major, modality-minor order.
    pub mixtures: Vec<Mixture>,
}

#[derive(Clone, Copy, Debug)]
pub struct EdgShape {
    pub num_modalities: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub k_top: usize,
}

impl EdgStack {
    pub fn new(store: &mut ParamStore, name: &str, shape: EdgShape, rng: &mut StreamRng) -> Result<Self, ModelError> {
        let EdgShape { num_modalities, dim, heads, num_layers, num_experts, k_top } = shape;
        if num_modalities < 2 {
            return Err(ModelError::Contract("modality gating needs at least two modalities".into()));
        }
        let in_dim = (num_modalities - 1) * dim;
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut banks = Vec::new();
            let mut attention = Vec::new();
            for m in 0..num_modalities {
                let prefix = format!("{name}/layer{l}/m{m}");
                banks.push(ExpertBank::new(store, &format!("{prefix}/moe"), in_dim, dim, num_experts, k_top, rng)?);
                attention.push(GraphTransformerLayer::new(store, &format!("{prefix}/gt"), dim, heads, rng)?);
            }
            layers.push(EdgLayer { banks, attention });
        }
        Ok(Self { layers, num_modalities })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        h0: &[Var],
        edges: &Arc<MessageEdges>,
    ) -> Result<EdgOutput, ModelError> {
        if h0.len() != self.num_modalities {
            return Err(ModelError::Contract(format!("{} modality states for {} banks", h0.len(), self.num_modalities)));
        }
        let mut states = h0.to_vec();
        let mut mixtures = Vec::new();
        for layer in &self.layers {
            let mut next = Vec::with_capacity(states.len());
            for m in 0..states.len() {
                let n = build_complement(tape, &states, m)?;
                let mix = layer.banks[m].mix(tape, ctx, n)?;
                next.push(layer.attention[m].forward(tape, ctx, states[m], mix.e, edges)?);
                mixtures.push(mix);
            }
            states = next;
        }
        Ok(EdgOutput { states, mixtures })
    }
}

/// Plain-value routing statistics of a logit matrix: `(f_k, P_k)`.
pub fn routing_fractions(logits: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = logits.dims2();
    let mut counts = vec![0usize; k];
    let mut p = vec![0.0; k];
    for i in 0..n {
        let row = logits.row(i);
        counts[top_k(row, 1)[0]] += 1;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..k {
            p[j] += (row[j] - max).exp() / z / n as f64;
        }
    }
    (counts.iter().map(|&c| c as f64 / n as f64).collect(), p)
}
