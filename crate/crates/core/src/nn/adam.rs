use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place at `effective_lr`.
    ///
    /// Moments always advance; the parameters are left untouched when
    /// `effective_lr` is zero.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], effective_lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(
                "adam step",
                self.m.len(),
                format!("params {} / grad {}", params.len(), grad.len()),
            ));
        }
        if let Some((i, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "adam gradient".into(),
                detail: format!("component {i} = {g} at step {}", self.step + 1),
            });
        }
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
        }
        if effective_lr == 0.0 {
            return Ok(());
        }
        for ((p, m), v) in params.iter_mut().zip(&self.m).zip(&self.v) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= effective_lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
