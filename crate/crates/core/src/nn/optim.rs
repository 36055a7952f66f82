use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            decay_every: 100,
            decay_factor: 0.9,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.lr;
        }
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.rows, p.cols))
            .collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update with learning rate `lr`. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) -> f64 {
        assert_eq!(grads.len(), store.len());
        let norm = grads.iter().map(|g| g.data.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.data.len() {
                let gk = g.data[k] * clip;
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p.data[k]);
            }
        }
        norm
    }
}
