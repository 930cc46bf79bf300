//! Training hyperparameters. Defaults are the fixed protocol values; runs
//! that want the grid search override them in the run config.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_base: f64,
    pub lr_head: f64,
    pub lr_adapters: f64,
    pub lr_v: f64,
    pub pretrain_epochs: usize,
    pub upstream_epochs: usize,
    pub adaptation_epochs: usize,
    pub warmup_epochs: usize,
    /// Batch size is `min(batch_cap, |support|)`.
    pub batch_cap: usize,
    /// Train the head first and then the composition logits alone (with the
    /// line-halving safeguard) instead of jointly.
    pub sequential_v_phase: bool,
    /// One logit vector per adapted site; `false` ties a single vector
    /// across all sites (ablation).
    pub per_site_weights: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_base: 1e-4,
            lr_head: 1e-3,
            lr_adapters: 1e-3,
            lr_v: 1e-2,
            pretrain_epochs: 50,
            upstream_epochs: 50,
            adaptation_epochs: 100,
            warmup_epochs: 5,
            batch_cap: 32,
            sequential_v_phase: false,
            per_site_weights: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_head", self.lr_head),
            ("lr_adapters", self.lr_adapters),
            ("lr_v", self.lr_v),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.warmup_epochs > self.adaptation_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds adaptation_epochs {}",
                self.warmup_epochs, self.adaptation_epochs
            )));
        }
        if self.batch_cap == 0 {
            return Err(Error::Config("batch_cap must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self, support: usize) -> usize {
        self.batch_cap.min(support).max(1)
    }
}
