//! Adam with decoupled weight decay. Moment buffers are kept per parameter,
//! aligned with [`ParamSet`] registration order; a phase passes the subset of
//! parameters it actually trains and everything else is left untouched.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay: applied directly to the weights, not through the
    /// gradient moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of completed steps; bias correction uses `step` after increment.
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let m = params.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        let v = params.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    /// Restores moment buffers (checkpoint load).
    pub fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != self.m[id.index()].len() || v.len() != self.v[id.index()].len() {
            return Err(Error::invalid(
                "AdamState::set_moments",
                format!("moment length mismatch for parameter index {}", id.index()),
            ));
        }
        self.m[id.index()] = m;
        self.v[id.index()] = v;
        Ok(())
    }

    /// One update over `active` parameters. Every active parameter must carry
    /// an accumulated gradient; a missing one is reported by name rather than
    /// silently skipped, since it means the graph never touched a parameter
    /// the phase claims to train.
    ///
    /// Update order per parameter: decoupled decay `p *= 1 - lr*wd`, then
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParamSet, active: &[ParamId]) -> Result<()> {
        for &id in active {
            if params.grad(id).is_none() {
                return Err(Error::MissingGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for &id in active {
            let g = params.grad(id).unwrap().to_vec();
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = params.value_mut(id);
            let decay = 1.0 - c.lr * c.weight_decay;
            for ((pi, mi), (vi, gi)) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(&g))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi * decay - c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
