use serde::{Deserialize, Serialize};

use super::Network;
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
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<N: Network>(net: &N, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = net.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected update. Parameters are left untouched when any
    /// gradient entry is non-finite.
    pub fn step<N: Network>(&mut self, net: &mut N, grads: &N) -> Result<()> {
        let gblocks = grads.blocks();
        if gblocks.len() != self.m.len() || gblocks.iter().zip(&self.m).any(|((_, g), m)| g.len() != m.len()) {
            return Err(Error::Shape("gradient blocks do not match optimizer state".into()));
        }
        if let Some((name, _)) = gblocks.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((params, (_, g)), m), v) in net.blocks_mut().into_iter().zip(&gblocks).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..params.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                params[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<N: Network>(grads: &mut N, max_norm: f64) -> f64 {
    let norm = grads.blocks().iter().flat_map(|(_, b)| b.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        super::scale_blocks(grads, max_norm / norm);
    }
    norm
}
