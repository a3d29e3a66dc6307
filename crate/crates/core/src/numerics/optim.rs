use super::array::DenseArray;
use super::params::{ParamId, ParamStore};

/// Warmup-then-inverse-sqrt learning-rate schedule scaled by `dim^-0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub lr_scale: f64,
    pub warmup: usize,
    pub model_dim: usize,
}

impl NoamSchedule {
    /// Learning rate at optimizer step `step` (1-based).
    pub fn rate(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup.max(1) as f64;
        self.lr_scale
            * (self.model_dim as f64).powf(-0.5)
            * step.powf(-0.5).min(step * warmup.powf(-1.5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

/// Running gradient sums for a minibatch.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sums: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            sums: store.ids().map(|id| vec![0.0; store.value(id).len()]).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &DenseArray, weight: f64) {
        for (s, g) in self.sums[id.0].iter_mut().zip(grad.data()) {
            *s += weight * g;
        }
    }

    pub fn add_all<'a>(&mut self, grads: impl IntoIterator<Item = (ParamId, &'a DenseArray)>, weight: f64) {
        for (id, g) in grads {
            self.add(id, g, weight);
        }
    }

    pub fn norm(&self) -> f64 {
        self.sums
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| s.fill(0.0));
    }

    pub fn sum(&self, id: ParamId) -> &[f64] {
        &self.sums[id.0]
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    schedule: NoamSchedule,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig, schedule: NoamSchedule) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Adam {
            config,
            schedule,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update from the accumulated gradients and returns the pre-clip norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradAccumulator) -> f64 {
        self.step += 1;
        let norm = grads.norm();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.schedule.rate(self.step);
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.sum(id);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k] * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        norm
    }
}
