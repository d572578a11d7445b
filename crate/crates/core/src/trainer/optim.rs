//! First-order optimizers with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// RMSprop smoothing constant.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Optimizer state: one or two moment buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Params) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Optimizer {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One descent step on `grads` (gradients of the loss to minimize).
    /// Weight decay `θ ← θ − lr·λ·θ` is applied separately from the adaptive
    /// update and only to groups that decay.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, p) in params.entries_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let decay = if p.group.decays() { c.learning_rate * c.weight_decay } else { 0.0 };
            let theta = p.value.data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            match c.kind {
                OptimizerKind::Rmsprop => {
                    for j in 0..theta.len() {
                        v[j] = c.alpha * v[j] + (1.0 - c.alpha) * g[j] * g[j];
                        theta[j] -= decay * theta[j] + c.learning_rate * g[j] / (v[j].sqrt() + c.eps);
                    }
                }
                OptimizerKind::Adam => {
                    for j in 0..theta.len() {
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                        let step = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                        theta[j] -= decay * theta[j] + c.learning_rate * step;
                    }
                }
            }
        }
    }
}
