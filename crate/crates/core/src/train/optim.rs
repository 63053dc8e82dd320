use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    /// `v = momentum * v + g + wd * p`, then `p -= lr * v`.
    Sgd { momentum: f64 },
    /// Decoupled weight decay:
    /// `m = b1 m + (1 - b1) g`, `v = b2 v + (1 - b2) g^2`,
    /// `p -= lr * (m / (1 - b1^t) / (sqrt(v / (1 - b2^t)) + eps) + wd * p)`.
    Adamw { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// `lr * (1 + cos(pi * t / total)) / 2` at zero-based step `t`.
    Cosine {
        total_steps: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            optimizer: Optimizer::Adamw { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            learning_rate: 1e-3,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimConfig { optimizer: Optimizer::Sgd { momentum }, learning_rate, ..Self::default() }
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine { total_steps } => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Moment buffers for every learnable parameter, in parameter order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: usize,
    ids: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &ParamSet<f32>) -> Self {
        let ids: Vec<ParamId> = params.learnable_ids().collect();
        let zeros = |ids: &[ParamId]| ids.iter().map(|&id| vec![0.0; params.value(id).len()]).collect::<Vec<_>>();
        let second = match config.optimizer {
            Optimizer::Adamw { .. } => zeros(&ids),
            Optimizer::Sgd { .. } => Vec::new(),
        };
        OptimState { config, step: 0, first: zeros(&ids), second, ids }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update. `grads[i]` is the gradient of `param_ids()[i]`.
    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), self.ids.len())));
        }
        let lr = self.config.rate_at(self.step);
        let wd = self.config.weight_decay;
        self.step += 1;
        let t = self.step as i32;
        for (i, (&id, g)) in self.ids.iter().zip(grads).enumerate() {
            let p = params.value_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::mismatch("optimizer", g.shape(), p.shape()));
            }
            let m = &mut self.first[i];
            match self.config.optimizer {
                Optimizer::Sgd { momentum } => {
                    for ((w, &g), m) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let w64 = *w as f64;
                        *m = momentum * *m + g as f64 + wd * w64;
                        *w = (w64 - lr * *m) as f32;
                    }
                }
                Optimizer::Adamw { beta1, beta2, epsilon } => {
                    let v = &mut self.second[i];
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let (w64, g) = (*w as f64, g as f64);
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let step = (*m / c1) / ((*v / c2).sqrt() + epsilon) + wd * w64;
                        *w = (w64 - lr * step) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
