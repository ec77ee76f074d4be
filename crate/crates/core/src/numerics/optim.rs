use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 4e-5, weight_decay: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    /// One update of every parameter in `store`.
    ///
    /// The moment step runs first, then `θ ← θ − lr·wd·θ`. Fails before
    /// touching anything if a parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if self.m.len() != store.len() {
            return Err(NumericsError::Contract("optimizer built for a different parameter set"));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(NumericsError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamWConfig { lr, weight_decay, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = store.grad(id).expect("checked above").data().to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let theta = store.value_mut(id).data_mut();
            for i in 0..theta.len() {
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                theta[i] -= lr * weight_decay * theta[i];
            }
        }
        Ok(())
    }

    /// Moment buffers as named entries (`<param>/m`, `<param>/v`) plus the step count.
    pub fn named_state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adamw/step".to_string(), Tensor::scalar(self.step as f64))];
        for (id, p) in store.iter() {
            out.push((format!("{}/m", p.name), self.m[id.index()].clone()));
            out.push((format!("{}/v", p.name), self.v[id.index()].clone()));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, entries: &[(String, Tensor)]) -> Result<(), NumericsError> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| NumericsError::Shape(format!("optimizer state lacks {name}")))
        };
        self.step = find("adamw/step")?.item() as u64;
        for (id, p) in store.iter() {
            let (m, v) = (find(&format!("{}/m", p.name))?, find(&format!("{}/v", p.name))?);
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(NumericsError::Shape(format!("moment shape for {}", p.name)));
            }
            self.m[id.index()] = m;
            self.v[id.index()] = v;
        }
        Ok(())
    }
}
