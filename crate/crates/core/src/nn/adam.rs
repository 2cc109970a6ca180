use ndarray::{Array2, Zip};

use super::{Gradients, ModelParams};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, default betas and epsilon.
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros = || -> Vec<Array2<f64>> {
            params
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.dim()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let n = params.tensors.len();
    if grads.tensors.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    for i in 0..n {
        let dim = params.tensors[i].dim();
        if grads.tensors[i].dim() != dim || state.m[i].dim() != dim || state.v[i].dim() != dim {
            return Err(Error::contract(format!("shape mismatch in tensor {i}")));
        }
    }

    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (lr, eps) = (state.lr, state.eps);
    for i in 0..n {
        Zip::from(&mut params.tensors[i])
            .and(&grads.tensors[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
