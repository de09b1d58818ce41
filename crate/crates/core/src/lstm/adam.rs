use serde::{Deserialize, Serialize};

use super::net::Model;
use super::params::{Params, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `shapes` (one length per tensor).
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        AdamState {
            config,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &Params<T>) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(config, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Fails without touching anything if a
    /// gradient is non-finite.
    pub fn step_tensors(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam: tensor count mismatch"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::shape("adam: tensor length mismatch"));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged("non-finite gradient".into()));
        }

        self.t += 1;
        let c = &self.config;
        let b1 = T::from(c.beta1).expect("finite");
        let b2 = T::from(c.beta2).expect("finite");
        let one = T::one();
        let step = self.t as i32;
        // lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t), eps scaled to match the
        // textbook form m_hat / (sqrt(v_hat) + eps).
        let bc1 = 1.0 - c.beta1.powi(step);
        let bc2 = 1.0 - c.beta2.powi(step);
        let lr_t = T::from(c.lr * bc2.sqrt() / bc1).expect("finite");
        let eps_t = T::from(c.eps * bc2.sqrt()).expect("finite");

        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - lr_t * *m / (v.sqrt() + eps_t);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Params<T>) -> Result<()> {
        let grads = grads.tensors();
        let mut params = model.params_mut().tensors_mut();
        self.step_tensors(&mut params, &grads)
    }
}
