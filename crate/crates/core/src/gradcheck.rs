//! Central finite-difference check of parameter gradients.
//!
//! The loss may contain stop-gradients and discrete decisions (nearest-token
//! lookup, top-k routing, load fractions). Perturbed values are recomputed
//! from the ops recorded in one forward pass, so those stay fixed and the
//! finite differences measure the same surrogate function that
//! backpropagation differentiates. Only nodes downstream of the perturbed
//! parameter are recomputed.

use serde::Serialize;

use crate::encoder::{ForwardCtx, ModelError};
use crate::numerics::{ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7, step: 1e-5 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: usize,
    pub entries: usize,
    /// Largest `|a − n| / max(|a|, |n|)` among entries above the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares autodiff and central differences for every entry of every parameter.
///
/// `loss` is built once, on a tape with all of `store` already bound in `ctx`.
pub fn check_params<F>(store: &ParamStore, loss: F, tol: Tolerance) -> Result<GradReport, ModelError>
where
    F: Fn(&mut Tape, &mut ForwardCtx) -> Result<Var, ModelError>,
{
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval(&mut tape, store)?;
    let out = loss(&mut tape, &mut ctx)?;
    let grads = tape.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.accumulate_param_grads(&grads, &mut analytic);

    let mut report = GradReport { params: store.len(), entries: 0, max_rel_err: 0.0, max_abs_err: 0.0, mismatches: Vec::new() };
    for id in store.ids() {
        let name = store.name(id).to_string();
        let g = analytic.grad(id).expect("every bound parameter has a gradient").clone();
        let leaf = tape.binding(id).expect("every parameter is bound");
        let order = tape.downstream(leaf, out);
        for i in 0..store.value(id).len() {
            let plus = tape.perturbed_value(leaf, i, tol.step, &order, out)?;
            let minus = tape.perturbed_value(leaf, i, -tol.step, &order, out)?;
            let fd = (plus - minus) / (2.0 * tol.step);
            let ad = g.data()[i];
            let err = (ad - fd).abs();
            let scale = ad.abs().max(fd.abs());
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            if err > tol.abs {
                report.max_rel_err = report.max_rel_err.max(err / scale);
            }
            if err > (tol.rel * scale).max(tol.abs) {
                report.mismatches.push(Mismatch { param: name.clone(), index: i, autodiff: ad, finite_diff: fd });
            }
        }
    }
    Ok(report)
}

/// Checks every parameter of `model` on the full pre-training loss of one
/// masked ego batch (dropout off, since masks would differ between passes).
pub fn check_model(
    model: &crate::model::PlanetModel,
    batch: &crate::magdata::EgoBatch,
    masked: &[crate::numerics::Tensor],
    plan: &crate::magdata::MaskPlan,
    weights: &crate::objective::LossWeights,
    tol: Tolerance,
) -> Result<GradReport, ModelError> {
    check_params(&model.store, |tape, ctx| Ok(model.loss(tape, ctx, batch, masked, plan, weights)?.total), tol)
}

/// Redraws every bias uniformly in [-0.5, 0.5). Freshly initialised biases are
/// zero, which puts ReLU inputs of all-zero (masked) rows exactly on the kink.
pub fn jitter_biases(store: &mut ParamStore, seed: crate::numerics::Seed) {
    use rand::Rng;
    let mut rng = seed.stream("bias");
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("/b") || store.name(id).ends_with("/bias") {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}
