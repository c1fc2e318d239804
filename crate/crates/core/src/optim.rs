//! Adam with parameter groups over f32 storage and f64 moment state.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First/second moment state for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Zeroes the moments and resizes to `len`; the step count keeps
    /// running so bias correction stays stable across scene edits.
    pub fn reset(&mut self, len: usize) {
        self.m.clear();
        self.m.resize(len, 0.0);
        self.v.clear();
        self.v.resize(len, 0.0);
    }

    /// One Adam update over the whole group. Parameters are read and written
    /// as f32 but the arithmetic is f64.
    pub fn step(&mut self, params: &mut [f32], grads: &[f64], lr: f64, hp: &AdamParams) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: (self.m.len(), self.m.len()),
                got: (params.len(), grads.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = (params[i] as f64 - lr * m_hat / (v_hat.sqrt() + hp.eps)) as f32;
        }
        Ok(())
    }
}
