//! Bias-corrected Adam with optional decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices and embeddings only
    /// (never to biases or layer-norm parameters).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, tensor: usize) -> &[f64] {
        &self.m[tensor]
    }

    pub fn second_moment(&self, tensor: usize) -> &[f64] {
        &self.v[tensor]
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.contains(".norm."))
}

/// One Adam update of `params` in place. The update is computed in f64 and
/// rounded back to the f32 parameter storage.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.data.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "adam: {} tensors, {} gradients, {} moment slots",
            tensors.len(),
            grads.data.len(),
            state.m.len()
        )));
    }
    for (i, t) in tensors.iter().enumerate() {
        if grads.names[i] != t.name
            || grads.data[i].len() != t.numel()
            || state.m[i].len() != t.numel()
        {
            return Err(Error::Shape(format!(
                "adam: gradient or moments do not match tensor {}",
                t.name
            )));
        }
    }
    let c = &state.config;
    state.step += 1;
    let step = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(step);
    let bc2 = 1.0 - c.beta2.powi(step);
    for (i, t) in tensors.iter_mut().enumerate() {
        let decay = if decays(&t.name) { c.weight_decay } else { 0.0 };
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads.data[i]);
        for (j, p) in t.data.iter_mut().enumerate() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let mut x = *p as f64;
            x -= c.lr * (mhat / (vhat.sqrt() + c.eps) + decay * x);
            *p = x as f32;
        }
    }
    Ok(())
}
