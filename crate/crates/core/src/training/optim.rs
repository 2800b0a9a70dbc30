use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay. Decay is applied only to parameters
/// flagged `weight_decay_eligible`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("lr", format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", format!("must be nonnegative, got {weight_decay}")));
        }
        Ok(AdamW { lr, weight_decay, beta1: BETA1, beta2: BETA2, eps: ADAM_EPS, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the gradients accumulated on `params`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for p in params.iter() {
            if p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let decay = if p.weight_decay_eligible { 1.0 - self.lr * self.weight_decay } else { 1.0 };
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
