use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

/// Inverse-square-root learning-rate schedule with linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseSqrtSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl InverseSqrtSchedule {
    /// Learning rate used for update number `step` (1-based).
    pub fn lr(&self, step: u64) -> f64 {
        let warmup = self.warmup_steps.max(1);
        if step < warmup {
            step as f64 / warmup as f64 * self.peak_lr
        } else {
            self.peak_lr * (warmup as f64 / step as f64).sqrt()
        }
    }
}

impl Default for InverseSqrtSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: InverseSqrtSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule: InverseSqrtSchedule::default(),
        }
    }
}

/// Adam moment estimates, aligned with the parameter order of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
        params: &ParamStore,
    ) -> Result<Self, NumericsError> {
        if first.len() != params.len() || second.len() != params.len() {
            return Err(NumericsError::OptimizerState(format!(
                "expected {} moment tensors, got {} / {}",
                params.len(),
                first.len(),
                second.len()
            )));
        }
        for ((_, p), (m, v)) in params.iter().zip(first.iter().zip(&second)) {
            if m.shape() != p.value().shape() || v.shape() != p.value().shape() {
                return Err(NumericsError::OptimizerState(format!(
                    "moment shape mismatch for {}",
                    p.name
                )));
            }
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr(self.step + 1)
    }

    /// Applies one bias-corrected Adam update. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NumericsError> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(NumericsError::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let lr = self.config.schedule.lr(self.step);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = params.get(id).grad().expect("checked above").clone();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let value = params.value_mut(id).data_mut();
            for (j, g) in grad.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                value[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
