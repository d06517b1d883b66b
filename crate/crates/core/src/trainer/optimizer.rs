use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adadelta {
        rho: f64,
        eps: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub const fn adadelta() -> Self {
        Optimizer::Adadelta {
            rho: 0.95,
            eps: 1e-6,
        }
    }

    pub const fn adam() -> Self {
        Optimizer::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adadelta()
    }
}

/// Per-parameter accumulators.
///
/// ADADELTA keeps `E[g²]` in `first` and `E[Δ²]` in `second`; ADAM keeps the
/// first and second raw moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub optimizer: Optimizer,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, n_params: usize) -> Self {
        Self {
            optimizer,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            steps: 0,
        }
    }

    /// Applies one descent step to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim(self.first.len(), params.len())?;
        check_dim(self.first.len(), grad.len())?;
        self.steps += 1;
        match self.optimizer {
            Optimizer::Adadelta { rho, eps } => {
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = rho * self.first[i] + (1.0 - rho) * g * g;
                    let delta = -((self.second[i] + eps).sqrt() / (self.first[i] + eps).sqrt()) * g;
                    self.second[i] = rho * self.second[i] + (1.0 - rho) * delta * delta;
                    params[i] += delta;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
