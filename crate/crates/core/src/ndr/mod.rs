//! Node-wise discretisation: a shared token codebook, nearest-token
//! quantisation with straight-through gradients, the anchor-based contrastive
//! alignment loss and the commitment loss.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{ForwardCtx, ModelError};
use crate::numerics::{ParamId, ParamStore, StreamRng, Tape, Tensor, Var};

/// Learnable token matrix `S ∈ R^{C×d}` with usage counters.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub tokens: ParamId,
    pub size: usize,
    pub dim: usize,
    pub tau: f64,
    pub gamma: f64,
    usage: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct QuantizeResult {
    /// Forward value `s_c`; gradient passes straight through to the input.
    pub quantized: Var,
    /// `s_c` gathered from the codebook, differentiable w.r.t. the tokens.
    pub tokens: Var,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub usage: Vec<u64>,
    pub dead: usize,
    pub perplexity: f64,
}

impl Codebook {
    /// Gaussian-initialised tokens; [`Codebook::init_from_rows`] replaces them with data.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        dim: usize,
        tau: f64,
        gamma: f64,
        rng: &mut StreamRng,
    ) -> Result<Self, ModelError> {
        if size == 0 {
            return Err(ModelError::Config("codebook needs at least one token".into()));
        }
        if !(tau > 0.0) || !(gamma >= 0.0) {
            return Err(ModelError::Config(format!("temperature {tau} / commitment {gamma}")));
        }
        let data = (0..size * dim).map(|_| StandardNormal.sample(rng)).collect();
        let tokens = store.register(format!("{name}/tokens"), Tensor::matrix(size, dim, data)?)?;
        Ok(Self { tokens, size, dim, tau, gamma, usage: vec![0; size] })
    }

    /// Overwrites the first `rows.len()` tokens (at most `C`) with the given rows.
    pub fn init_from_rows(&self, store: &mut ParamStore, rows: &[Vec<f64>]) -> Result<usize, ModelError> {
        let t = store.value_mut(self.tokens);
        let k = rows.len().min(self.size);
        for (i, r) in rows.iter().take(k).enumerate() {
            if r.len() != self.dim {
                return Err(ModelError::Contract(format!("init row width {} for token width {}", r.len(), self.dim)));
            }
            t.row_mut(i).copy_from_slice(r);
        }
        Ok(k)
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        indices.iter().for_each(|&i| self.usage[i] += 1);
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn report(&self) -> CodebookReport {
        codebook_report(&self.usage)
    }

    /// Nearest token per row; `h` stays attached through the straight-through path.
    pub fn quantize(&self, tape: &mut Tape, ctx: &ForwardCtx, h: Var) -> Result<QuantizeResult, ModelError> {
        let s = ctx.var(self.tokens);
        if tape.value(h).dims2().1 != self.dim {
            return Err(ModelError::Contract(format!("quantize width {} vs codebook {}", tape.value(h).dims2().1, self.dim)));
        }
        let indices = tape.choose(|t| nearest_tokens(t.value(s), t.value(h)))?;
        let tokens = tape.gather_rows(s, &indices)?;
        // s_c + (h − sg[h]): the value is s_c bit-for-bit, the gradient reaches h unchanged.
        let fixed = tape.detach(tokens)?;
        let hd = tape.detach(h)?;
        let delta = tape.sub(h, hd)?;
        let quantized = tape.add(fixed, delta)?;
        Ok(QuantizeResult { quantized, tokens, indices })
    }
}

/// Index of the nearest row of `tokens` for each row of `h`, lowest index on ties.
pub fn nearest_tokens(tokens: &Tensor, h: &Tensor) -> Vec<usize> {
    (0..h.rows())
        .map(|i| {
            let x = h.row(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..tokens.rows() {
                let d: f64 = tokens.row(j).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Mean Euclidean distance from each row to its nearest token.
pub fn quantization_residual(tokens: &Tensor, h: &Tensor) -> f64 {
    if h.rows() == 0 {
        return 0.0;
    }
    let idx = nearest_tokens(tokens, h);
    let total: f64 = idx
        .iter()
        .enumerate()
        .map(|(i, &j)| tokens.row(j).iter().zip(h.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    total / h.rows() as f64
}

/// Symmetric InfoNCE between the anchor and every other modality, cosine similarity over `τ`.
pub fn general_knowledge_loss(tape: &mut Tape, quantized: &[Var], anchor: usize, tau: f64) -> Result<Var, ModelError> {
    if quantized.len() < 2 {
        return Err(ModelError::Contract("alignment needs at least two modalities".into()));
    }
    let anchor_q = *quantized.get(anchor).ok_or(ModelError::UnknownModality(anchor))?;
    let (n, d) = tape.value(anchor_q).dims2();
    if quantized.iter().any(|&q| tape.value(q).dims2() != (n, d)) {
        return Err(ModelError::Contract("quantized matrices differ in shape".into()));
    }
    let a = tape.normalize_rows(anchor_q, 1e-12)?;
    let mut total: Option<Var> = None;
    for (m, &q) in quantized.iter().enumerate() {
        if m == anchor {
            continue;
        }
        let b = tape.normalize_rows(q, 1e-12)?;
        let bt = tape.transpose(b)?;
        let sim = tape.matmul(a, bt)?;
        let logits = tape.scale(sim, 1.0 / tau)?;
        let rows = tape.log_softmax(logits, 1)?;
        let cols = tape.log_softmax(logits, 0)?;
        let both = tape.add(rows, cols)?;
        let diag = tape.diag(both)?;
        let s = tape.sum(diag)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.expect("at least one non-anchor modality");
    let denom = (n.max(1) * (quantized.len() - 1)) as f64;
    Ok(tape.scale(total, -1.0 / denom)?)
}

/// `(1/N)·Σ_m Σ_i ‖sg[s_c] − h‖² + γ‖s_c − sg[h]‖²`.
pub fn vq_loss(tape: &mut Tape, encoded: &[Var], results: &[QuantizeResult], gamma: f64) -> Result<Var, ModelError> {
    if encoded.len() != results.len() || encoded.is_empty() {
        return Err(ModelError::Contract("one quantize result per modality".into()));
    }
    let n = tape.value(encoded[0]).dims2().0;
    let mut total: Option<Var> = None;
    for (&h, r) in encoded.iter().zip(results) {
        let sc_fixed = tape.detach(r.tokens)?;
        let h_fixed = tape.detach(h)?;
        let commit = tape.sub(sc_fixed, h)?;
        let commit = tape.sq_sum(commit)?;
        let book = tape.sub(r.tokens, h_fixed)?;
        let book = tape.sq_sum(book)?;
        let book = tape.scale(book, gamma)?;
        let term = tape.add(commit, book)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / n.max(1) as f64)?)
}

pub fn codebook_report(usage: &[u64]) -> CodebookReport {
    let total: u64 = usage.iter().sum();
    let dead = usage.iter().filter(|&&u| u == 0).count();
    let entropy: f64 = if total == 0 {
        0.0
    } else {
        usage
            .iter()
            .filter(|&&u| u > 0)
            .map(|&u| {
                let p = u as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    };
    CodebookReport { usage: usage.to_vec(), dead, perplexity: entropy.exp() }
}

#[cfg(test)]
mod tests;
