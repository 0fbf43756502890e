use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW moments plus per-group learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    /// Learning-rate overrides per group; groups not listed use `config.lr`.
    pub group_lr: Vec<(ParamGroup, f64)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        OptimizerState { config, group_lr: Vec::new(), first: zeros.clone(), second: zeros, step: 0 }
    }

    pub fn with_group_lr(mut self, group: ParamGroup, lr: f64) -> Self {
        self.group_lr.retain(|(g, _)| *g != group);
        self.group_lr.push((group, lr));
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        self.group_lr.iter().find(|(g, _)| *g == group).map_or(self.config.lr, |(_, lr)| *lr)
    }

    /// One decoupled-weight-decay Adam update. `lr_scale` multiplies every
    /// group's rate (used by the step-decay schedule).
    pub fn adamw_step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr_scale: f64) -> Result<(), AutodiffError> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(AutodiffError::StateMismatch(format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.first.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(AutodiffError::StateMismatch(format!("gradient shape for `{}`", params.name(id))));
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamWConfig { weight_decay, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in params.ids().zip(grads) {
            let lr = self.lr_for(params.group(id)) * lr_scale;
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * weight_decay * p[j];
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiply the learning rate by `factor` at each listed epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay { milestones: vec![30, 60], factor: 0.1 }
    }
}

impl StepDecay {
    pub fn scale(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.factor.powi(passed as i32)
    }
}
