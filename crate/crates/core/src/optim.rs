//! AdamW with decoupled weight decay and bias-corrected moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWParams {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWParams {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One update of `params` at step `t` (1-based).
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut Moments, t: u64, hp: &AdamWParams) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        let m = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * params[i]);
    }
}

/// Per-parameter moment store keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    /// Starts a new optimizer step; subsequent [`AdamW::apply`] calls use its count.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, hp: &AdamWParams) -> Result<()> {
        if param.shape != grad.shape {
            return Err(Error::shape(
                "optimizer",
                format!("{name} {:?}", param.shape),
                format!("{:?}", grad.shape),
            ));
        }
        let state = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments::zeros(param.len()));
        adamw_step(&mut param.data, &grad.data, state, self.step, hp);
        Ok(())
    }
}
