use rand::Rng;

use super::ModelError;
use crate::numerics::{ParamId, ParamStore, StreamRng, Tape, Tensor, Var};

/// Parameter bindings and dropout state for one forward pass.
///
/// Every parameter in the store is bound up front so that each one receives
/// a gradient, possibly zero, from every backward pass.
pub struct ForwardCtx {
    vars: Vec<Var>,
    dropout_p: f64,
    rng: Option<StreamRng>,
}

impl ForwardCtx {
    /// Inference mode: no dropout.
    pub fn eval(tape: &mut Tape, store: &ParamStore) -> Result<Self, ModelError> {
        Self::bind(tape, store, 0.0, None)
    }

    /// Training mode with dropout masks drawn from `rng`.
    pub fn train(tape: &mut Tape, store: &ParamStore, dropout_p: f64, rng: StreamRng) -> Result<Self, ModelError> {
        Self::bind(tape, store, dropout_p, Some(rng))
    }

    fn bind(tape: &mut Tape, store: &ParamStore, dropout_p: f64, rng: Option<StreamRng>) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(ModelError::Config(format!("dropout {dropout_p} outside [0, 1)")));
        }
        let vars = store.ids().map(|id| tape.param(store, id)).collect::<Result<_, _>>()?;
        Ok(Self { vars, dropout_p, rng })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn training(&self) -> bool {
        self.rng.is_some() && self.dropout_p > 0.0
    }

    /// Inverted dropout; the identity outside training.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let p = self.dropout_p;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let (n, d) = tape.value(x).dims2();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n * d).map(|_| if rng.random_bool(p) { 0.0 } else { keep }).collect();
        let mask = tape.constant(Tensor::matrix(n, d, mask)?)?;
        Ok(tape.mul(x, mask)?)
    }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialisation.
pub(crate) fn uniform_init(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor {
    let a = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Result<Self, ModelError> {
        let w = store.register(format!("{name}/w"), uniform_init(fan_in, fan_out, rng))?;
        let b = store.register(format!("{name}/b"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &ForwardCtx, x: Var) -> Result<Var, ModelError> {
        let y = tape.matmul(x, ctx.var(self.w))?;
        Ok(tape.add_row(y, ctx.var(self.b))?)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}/l1"), fan_in, hidden, rng)?,
            l2: Linear::new(store, &format!("{name}/l2"), hidden, fan_out, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &ForwardCtx, x: Var) -> Result<Var, ModelError> {
        let h = self.l1.forward(tape, ctx, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, ctx, h)
    }
}
