use serde::{Deserialize, Serialize};

use super::{Mlp, MlpGrads};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: MlpGrads,
    pub v: MlpGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self { config, m: MlpGrads::zeros_like(net), v: MlpGrads::zeros_like(net), step: 0 }
    }

    /// One bias-corrected Adam update. Non-finite gradients are refused
    /// before anything is modified.
    pub fn step(&mut self, params: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if !grads.matches(params) || !self.m.matches(params) {
            return Err(Error::shape("adam state, gradients and parameters disagree in shape"));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("adam gradient".into()));
        }
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (l, layer) in params.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[l];
            let m = &mut self.m.layers[l];
            let v = &mut self.v.layers[l];
            let pairs = layer
                .weights
                .iter_mut()
                .zip(&g.weights)
                .zip(m.weights.iter_mut().zip(v.weights.iter_mut()))
                .chain(
                    layer
                        .bias
                        .iter_mut()
                        .zip(&g.bias)
                        .zip(m.bias.iter_mut().zip(v.bias.iter_mut())),
                );
            for ((p, &gi), (mi, vi)) in pairs {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// `target <- rho * target + (1 - rho) * online`, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("polyak coefficient {rho} outside [0, 1]")));
    }
    if !target.same_shape(online) {
        return Err(Error::shape("polyak target and online networks differ in shape"));
    }
    let src = online.flatten();
    let mut it = src.iter();
    target.for_each_param_mut(|t| {
        let o = *it.next().unwrap();
        *t = rho * *t + (1.0 - rho) * o;
    });
    Ok(())
}
