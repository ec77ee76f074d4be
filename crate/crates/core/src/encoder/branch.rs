use std::sync::Arc;

use super::{ForwardCtx, GraphTransformerLayer, Mlp, ModelError};
use crate::numerics::{MessageEdges, ParamStore, StreamRng, Tape, Var};

/// Per-modality projection `d_m → d` and a stack of self-modal transformer layers.
#[derive(Clone, Debug)]
pub struct ModalityBranch {
    pub proj: Mlp,
    pub layers: Vec<GraphTransformerLayer>,
}

impl ModalityBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        dim: usize,
        heads: usize,
        num_layers: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, ModelError> {
        let proj = Mlp::new(store, &format!("{name}/proj"), in_dim, dim, dim, rng)?;
        let layers = (0..num_layers)
            .map(|l| GraphTransformerLayer::new(store, &format!("{name}/gt{l}"), dim, heads, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { proj, layers })
    }

    /// `H^(0,m) = MLP_m(X̃^(m))`.
    pub fn project(&self, tape: &mut Tape, ctx: &ForwardCtx, x: Var) -> Result<Var, ModelError> {
        let (_, d) = tape.value(x).dims2();
        if d != self.proj.l1.fan_in {
            return Err(ModelError::Contract(format!("modality input width {d}, expected {}", self.proj.l1.fan_in)));
        }
        self.proj.forward(tape, ctx, x)
    }

    /// Self-modal attention stack: neighbour signals are the layer's own input states.
    pub fn specific(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        h0: Var,
        edges: &Arc<MessageEdges>,
    ) -> Result<Var, ModelError> {
        let mut h = h0;
        for layer in &self.layers {
            h = layer.forward(tape, ctx, h, h, edges)?;
        }
        Ok(h)
    }
}
