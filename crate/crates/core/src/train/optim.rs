use serde::{Deserialize, Serialize};

use crate::error::{ActError, Result};
use crate::nn::ParamStore;

/// Optimization and data settings for toy-scale training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// The learning rate halves every `halving_period` steps.
    pub halving_period: u64,
    pub steps: u64,
    /// High-resolution patch side.
    pub patch_size: usize,
    pub augment: bool,
    /// Held-out evaluation every this many steps (0 disables it).
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            halving_period: 1000,
            steps: 2000,
            patch_size: 48,
            augment: true,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 >= 0.0
            && self.lr0.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.batch_size > 0
            && self.halving_period > 0
            && self.steps > 0
            && self.patch_size > 0;
        if !positive {
            return Err(ActError::Config(format!("invalid training settings: {self:?}")));
        }
        if self.halving_period > self.steps {
            return Err(ActError::Config(format!(
                "halving period {} exceeds total steps {}",
                self.halving_period, self.steps
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(ActError::Config(format!("seed {} exceeds the TOML integer range", self.seed)));
        }
        Ok(())
    }
}

/// `lr0 * 2^-floor(step / period)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (step / cfg.halving_period).min(i32::MAX as u64) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps, store)
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moments of parameter `index`.
    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.m[index], &self.v[index])
    }

    /// One update. `grads` follows the store's registration order. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(ActError::Training(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.len() != p.tensor.numel() {
                return Err(ActError::Training(format!("gradient size mismatch for `{}`", p.name)));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(ActError::Training(format!(
                    "non-finite gradient {} at element {i} of `{}` (step {})",
                    g[i],
                    p.name,
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
