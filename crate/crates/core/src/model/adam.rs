use super::params::ModelParams;
use crate::error::{Error, Result};

/// Adam with bias correction, one moment pair per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update using the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        let tensors = params.tensors();
        if tensors.len() != self.first.len()
            || tensors
                .iter()
                .zip(&self.first)
                .any(|(t, m)| t.len() != m.len())
        {
            return Err(Error::shape(
                "optimizer moments do not match parameter shapes",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for ((tensor, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), mi), vi) in tensor
                .value
                .iter_mut()
                .zip(&tensor.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if !params.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameter after optimizer step {}",
                self.step
            )));
        }
        Ok(())
    }
}
