//! Adam with bias correction and decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Applies one update to every tensor in `params` (always the same list,
    /// in the same order) and clears their gradients.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.states.is_empty() {
            self.states = params.iter().map(|p| AdamState::new(p.numel())).collect();
        }
        if self.states.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "optimizer tracks {} tensors, step called with {}",
                self.states.len(),
                params.len()
            )));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let g = p
                .grad()
                .ok_or_else(|| Error::Optimizer(format!("parameter #{i} has no gradient")))?;
            if g.len() != self.states[i].first_moment.len() {
                return Err(Error::Optimizer(format!("parameter #{i} changed shape")));
            }
            grads.push(g);
        }

        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for ((p, g), state) in params.iter().zip(grads).zip(&mut self.states) {
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            p.update_values(|w| {
                for i in 0..w.len() {
                    let m = &mut state.first_moment[i];
                    let v = &mut state.second_moment[i];
                    *m = beta1 * *m + (1.0 - beta1) * g[i];
                    *v = beta2 * *v + (1.0 - beta2) * g[i] * g[i];
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    w[i] -= lr * (update + weight_decay * w[i]);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}
