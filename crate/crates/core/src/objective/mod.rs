//! Fusion, reconstruction decoders, structural and load-balancing losses and
//! the weighted training objective.

use serde::{Deserialize, Serialize};

use crate::edg::RoutingStats;
use crate::encoder::{ForwardCtx, Mlp, ModelError};
use crate::numerics::{ParamStore, StreamRng, Tape, Tensor, Var};

/// `H^(all,m) = H^(spe,m) ‖ H^(cross,m)`.
pub fn fuse(tape: &mut Tape, spe: Var, cross: Var) -> Result<Var, ModelError> {
    if tape.value(spe).dims2() != tape.value(cross).dims2() {
        return Err(ModelError::Contract("specific and cross parts differ in shape".into()));
    }
    Ok(tape.concat_cols(&[spe, cross])?)
}

/// Node embedding `h_i = ‖_m h_i^(all,m)` in modality order.
pub fn fuse_node(tape: &mut Tape, all: &[Var]) -> Result<Var, ModelError> {
    Ok(tape.concat_cols(all)?)
}

/// Self-, cross- and structural decoders.
#[derive(Clone, Debug)]
pub struct DecoderSet {
    pub smr: Vec<Mlp>,
    /// `(source, target, decoder)` for every ordered pair of distinct modalities.
    pub cmr: Vec<(usize, usize, Mlp)>,
    pub sr: Vec<Mlp>,
}

impl DecoderSet {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, modality_dims: &[usize], rng: &mut StreamRng) -> Result<Self, ModelError> {
        let mut smr = Vec::new();
        let mut cmr = Vec::new();
        let mut sr = Vec::new();
        for (m, &dm) in modality_dims.iter().enumerate() {
            smr.push(Mlp::new(store, &format!("{name}/smr{m}"), 2 * dim, dim, dm, rng)?);
        }
        for m in 0..modality_dims.len() {
            for (t, &dt) in modality_dims.iter().enumerate() {
                if t != m {
                    cmr.push((m, t, Mlp::new(store, &format!("{name}/cmr{m}_{t}"), 2 * dim, dim, dt, rng)?));
                }
            }
        }
        for m in 0..modality_dims.len() {
            sr.push(Mlp::new(store, &format!("{name}/sr{m}"), 2 * dim, dim, dim, rng)?);
        }
        Ok(Self { smr, cmr, sr })
    }
}

/// Sum over rows of squared error, restricted to `rows` when given.
fn sq_error(tape: &mut Tape, pred: Var, target: Var, rows: Option<&[usize]>) -> Result<Var, ModelError> {
    let diff = tape.sub(pred, target)?;
    let diff = match rows {
        Some(r) => tape.gather_rows(diff, r)?,
        None => diff,
    };
    Ok(tape.sq_sum(diff)?)
}

fn sum_all(tape: &mut Tape, terms: Vec<Var>) -> Result<Var, ModelError> {
    let mut it = terms.into_iter();
    let first = match it.next() {
        Some(v) => v,
        None => return Ok(tape.constant(Tensor::scalar(0.0))?),
    };
    it.try_fold(first, |acc, v| tape.add(acc, v).map_err(ModelError::from))
}

/// Mean squared reconstruction of each modality from its own fused row.
///
/// `rows` restricts the loss to a node subset (masked nodes); `None` covers all.
pub fn self_recon_loss(
    tape: &mut Tape,
    ctx: &ForwardCtx,
    dec: &DecoderSet,
    all: &[Var],
    targets: &[Var],
    rows: Option<&[usize]>,
) -> Result<Var, ModelError> {
    let n = rows.map_or_else(|| tape.value(all[0]).dims2().0, <[usize]>::len);
    let mut terms = Vec::new();
    for (m, (&h, &x)) in all.iter().zip(targets).enumerate() {
        let pred = dec.smr[m].forward(tape, ctx, h)?;
        terms.push(sq_error(tape, pred, x, rows)?);
    }
    let total = sum_all(tape, terms)?;
    Ok(tape.scale(total, 1.0 / (all.len() * n).max(1) as f64)?)
}

/// Mean squared reconstruction of every other modality, over ordered pairs.
pub fn cross_recon_loss(
    tape: &mut Tape,
    ctx: &ForwardCtx,
    dec: &DecoderSet,
    all: &[Var],
    targets: &[Var],
    rows: Option<&[usize]>,
) -> Result<Var, ModelError> {
    let k = all.len();
    if k < 2 {
        return Err(ModelError::Contract("cross reconstruction needs two modalities".into()));
    }
    let n = rows.map_or_else(|| tape.value(all[0]).dims2().0, <[usize]>::len);
    let mut terms = Vec::new();
    for (m, t, d) in &dec.cmr {
        let pred = d.forward(tape, ctx, all[*m])?;
        terms.push(sq_error(tape, pred, targets[*t], rows)?);
    }
    let total = sum_all(tape, terms)?;
    Ok(tape.scale(total, 1.0 / ((k * k - k) * n).max(1) as f64)?)
}

/// Pairwise logits `⟨u_i, u_j⟩`, clamped to ±30.
fn pair_logits(tape: &mut Tape, u: Var, pairs: &[(usize, usize)]) -> Result<Var, ModelError> {
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let ua = tape.gather_rows(u, &a)?;
    let ub = tape.gather_rows(u, &b)?;
    let dots = tape.row_dot(ua, ub)?;
    Ok(tape.clamp(dots, -30.0, 30.0)?)
}

/// Edge reconstruction with binary cross-entropy, averaged over modalities.
pub fn topo_loss(
    tape: &mut Tape,
    ctx: &ForwardCtx,
    dec: &DecoderSet,
    all: &[Var],
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<Var, ModelError> {
    if positives.is_empty() {
        log::warn!("structural loss on a batch without positive edges");
    }
    let mut terms = Vec::new();
    for (m, &h) in all.iter().enumerate() {
        let u = dec.sr[m].forward(tape, ctx, h)?;
        terms.push(topo_from_embeddings(tape, u, positives, negatives)?);
    }
    let total = sum_all(tape, terms)?;
    Ok(tape.scale(total, 1.0 / all.len().max(1) as f64)?)
}

/// `−mean_{E⁺} log σ(u_iᵀu_j) − mean_{Ê} log(1 − σ(u_iᵀu_j))` for one modality.
pub fn topo_from_embeddings(
    tape: &mut Tape,
    u: Var,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<Var, ModelError> {
    let mut terms = Vec::new();
    if !positives.is_empty() {
        let l = pair_logits(tape, u, positives)?;
        let ls = tape.log_sigmoid(l)?;
        terms.push(tape.mean(ls)?);
    }
    if !negatives.is_empty() {
        let l = pair_logits(tape, u, negatives)?;
        let neg = tape.scale(l, -1.0)?;
        let ls = tape.log_sigmoid(neg)?;
        terms.push(tape.mean(ls)?);
    }
    let total = sum_all(tape, terms)?;
    Ok(tape.scale(total, -1.0)?)
}

/// Mean over banks of `K·Σ_k P_k f_k`.
pub fn load_balance_loss(tape: &mut Tape, stats: &[RoutingStats]) -> Result<Var, ModelError> {
    let mut terms = Vec::new();
    for s in stats {
        let k = s.fractions.len();
        let f = tape.constant(Tensor::matrix(1, k, s.fractions.clone())?)?;
        let pf = tape.mul(s.mean_probs, f)?;
        let sum = tape.sum(pf)?;
        terms.push(tape.scale(sum, k as f64)?);
    }
    let n = terms.len();
    let total = sum_all(tape, terms)?;
    Ok(tape.scale(total, 1.0 / n.max(1) as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub beta5: f64,
    pub beta_inter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta1: 0.1, beta2: 0.1, beta3: 0.2, beta4: 0.1, beta5: 0.01, beta_inter: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.beta1, self.beta2, self.beta3, self.beta4, self.beta5, self.beta_inter];
        if all.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(ModelError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// The loss components of one step, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_s: Var,
    pub l_c: Var,
    pub l_topo: Var,
    pub l_gen: Var,
    pub l_vq: Var,
    pub l_load: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_c: f64,
    pub l_feat: f64,
    pub l_topo: f64,
    pub l_gen: f64,
    pub l_vq: f64,
    pub l_load: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum recomputed from the component values.
    pub fn recompute(&self, w: &LossWeights) -> f64 {
        let l_feat = self.l_s + w.beta_inter * self.l_c;
        w.beta1 * l_feat + w.beta2 * self.l_topo + w.beta3 * self.l_gen + w.beta4 * self.l_vq + w.beta5 * self.l_load
    }
}

/// `β₁(L_s + β_inter·L_c) + β₂L_topo + β₃L_gen + β₄L_VQ + β₅L_load`.
pub fn total_loss(tape: &mut Tape, w: &LossWeights, t: &LossTerms) -> Result<(Var, LossBreakdown), ModelError> {
    w.validate()?;
    let lc = tape.scale(t.l_c, w.beta_inter)?;
    let feat = tape.add(t.l_s, lc)?;
    let parts = [(feat, w.beta1), (t.l_topo, w.beta2), (t.l_gen, w.beta3), (t.l_vq, w.beta4), (t.l_load, w.beta5)];
    let mut terms = Vec::with_capacity(parts.len());
    for (v, b) in parts {
        terms.push(tape.scale(v, b)?);
    }
    let total = sum_all(tape, terms)?;
    let val = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        l_s: val(t.l_s),
        l_c: val(t.l_c),
        l_feat: val(feat),
        l_topo: val(t.l_topo),
        l_gen: val(t.l_gen),
        l_vq: val(t.l_vq),
        l_load: val(t.l_load),
        total: val(total),
    };
    Ok((total, breakdown))
}
