//! Bias-corrected Adam over named parameter tensors.

use crate::error::{Error, Result};
use crate::params::{GradientSet, NamedTensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS_OPT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    /// First moments, one per parameter, in parameter order.
    pub m: Vec<NamedTensor>,
    /// Second moments.
    pub v: Vec<NamedTensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS_OPT,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Zero moments shaped like `params`.
    pub fn for_params(params: &[NamedTensor], lr: f64) -> Self {
        let mut s = Self::new(lr);
        s.m = params.iter().map(NamedTensor::zeros_like).collect();
        s.v = s.m.clone();
        s
    }

    fn ensure_moments(&mut self, params: &[NamedTensor]) -> Result<()> {
        if self.m.is_empty() && self.v.is_empty() {
            self.m = params.iter().map(NamedTensor::zeros_like).collect();
            self.v = self.m.clone();
            return Ok(());
        }
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if p.name != m.name || p.dims != m.dims || p.dims != v.dims {
                return Err(Error::State(format!("optimizer moment mismatch for {}", p.name)));
            }
        }
        Ok(())
    }

    /// One update of `params` in place. Parameters without a gradient are
    /// left untouched along with their moments. Nothing is modified if any
    /// gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [NamedTensor], grads: &GradientSet) -> Result<()> {
        self.ensure_moments(params)?;
        let step = self.t + 1;
        for p in params.iter() {
            if let Some(g) = grads.get(&p.name) {
                if g.dims != p.dims {
                    return Err(Error::shape(
                        "adam_step",
                        format!("gradient {:?} for {} of dims {:?}", g.dims, p.name, p.dims),
                    ));
                }
                if g.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        step,
                    });
                }
            }
        }

        self.t = step;
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = grads.get(&p.name) else { continue };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
