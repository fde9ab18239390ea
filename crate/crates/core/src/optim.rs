//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

/// Learning rate plus per-parameter moment buffers for the adaptive mode.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    learning_rate: f64,
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, kind: OptimizerKind) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {learning_rate}"));
        }
        Ok(OptimizerState {
            learning_rate,
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, OptimizerKind::Sgd)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, OptimizerKind::adam())
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in place from its gradient, then clears the
    /// gradients. Parameters must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::State(format!(
                "parameter {i} (shape {:?}) has no gradient",
                params[i].shape()
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let g = p.grad().expect("checked above").to_vec();
                    for (w, g) in p.data_mut().iter_mut().zip(&g) {
                        *w -= self.learning_rate * g;
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.second = self.first.clone();
                }
                if self.first.len() != params.len()
                    || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
                {
                    return Err(Error::State(
                        "parameter list changed shape between optimizer steps".into(),
                    ));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params
                    .iter_mut()
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = p.grad().expect("checked above").to_vec();
                    for (((w, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        for p in params.iter_mut() {
            p.clear_grad();
        }
        Ok(())
    }
}
