use std::sync::Arc;

use super::{ForwardCtx, Linear, ModelError};
use super::layers::uniform_init;
use crate::numerics::{MessageEdges, ParamId, ParamStore, StreamRng, Tape, Tensor, Var};

/// Multi-head attention from node states to neighbour signals, followed by
/// residual LayerNorm, a ReLU feed-forward block and a second residual LayerNorm.
#[derive(Clone, Debug)]
pub struct GraphTransformerLayer {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub heads: usize,
    pub dim: usize,
}

/// Output of one layer together with its attention weights (`E×H`).
pub struct LayerOutput {
    pub h: Var,
    pub alpha: Var,
}

impl GraphTransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut StreamRng) -> Result<Self, ModelError> {
        if heads == 0 || dim % heads != 0 {
            return Err(ModelError::Config(format!("{heads} heads do not divide hidden size {dim}")));
        }
        let mut mat = |store: &mut ParamStore, n: &str| store.register(format!("{name}/{n}"), uniform_init(dim, dim, rng));
        let (q, k, v, o) = (mat(store, "q")?, mat(store, "k")?, mat(store, "v")?, mat(store, "o")?);
        let ffn1 = Linear::new(store, &format!("{name}/ffn1"), dim, 2 * dim, rng)?;
        let ffn2 = Linear::new(store, &format!("{name}/ffn2"), 2 * dim, dim, rng)?;
        let ln = |store: &mut ParamStore, n: &str| -> Result<(ParamId, ParamId), ModelError> {
            Ok((
                store.register(format!("{name}/{n}/gain"), Tensor::full(&[1, dim], 1.0))?,
                store.register(format!("{name}/{n}/bias"), Tensor::zeros(&[1, dim]))?,
            ))
        };
        let (ln1, ln2) = (ln(store, "ln1")?, ln(store, "ln2")?);
        Ok(Self { q, k, v, o, ffn1, ffn2, ln1, ln2, heads, dim })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        h: Var,
        signal: Var,
        edges: &Arc<MessageEdges>,
    ) -> Result<Var, ModelError> {
        Ok(self.forward_with_attention(tape, ctx, h, signal, edges)?.h)
    }

    /// Queries come from `h`; keys and values from the neighbour `signal`.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        h: Var,
        signal: Var,
        edges: &Arc<MessageEdges>,
    ) -> Result<LayerOutput, ModelError> {
        if let Some(i) = edges.in_degree().iter().position(|&d| d == 0) {
            return Err(ModelError::Contract(format!("node {i} has an empty neighbourhood")));
        }
        let dk = self.dim / self.heads;
        let q = tape.matmul(h, ctx.var(self.q))?;
        let k = tape.matmul(signal, ctx.var(self.k))?;
        let v = tape.matmul(signal, ctx.var(self.v))?;
        let scores = tape.attn_scores(q, k, edges, self.heads, 1.0 / (dk as f64).sqrt())?;
        let alpha = tape.segment_softmax(scores, &edges.dst)?;
        let dropped = ctx.dropout(tape, alpha)?;
        let agg = tape.attn_aggregate(dropped, v, edges, self.heads)?;
        let attn = tape.matmul(agg, ctx.var(self.o))?;
        let r1 = tape.add(h, attn)?;
        let h1 = tape.layer_norm(r1, ctx.var(self.ln1.0), ctx.var(self.ln1.1))?;
        let f = self.ffn1.forward(tape, ctx, h1)?;
        let f = tape.relu(f)?;
        let f = ctx.dropout(tape, f)?;
        let f = self.ffn2.forward(tape, ctx, f)?;
        let r2 = tape.add(h1, f)?;
        let out = tape.layer_norm(r2, ctx.var(self.ln2.0), ctx.var(self.ln2.1))?;
        Ok(LayerOutput { h: out, alpha })
    }
}
