//! Architecture hyperparameters for the tiny pre-norm transformer
//! classifier. Inputs are flat vectors split into `tokens` patches; only the
//! attention q/k/v projections are ever adapted.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{SiteId, SiteRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Output classes; task-dependent, not part of the structural hash.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 64,
            tokens: 4,
            d_model: 16,
            heads: 2,
            blocks: 2,
            mlp_hidden: 32,
            classes: 8,
        }
    }
}

impl ModelConfig {
    /// Small config for gradient checks and other micro tests.
    pub fn micro() -> Self {
        ModelConfig {
            input_dim: 16,
            tokens: 4,
            d_model: 8,
            heads: 2,
            blocks: 2,
            mlp_hidden: 12,
            classes: 2,
        }
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens < 1 || self.input_dim % self.tokens != 0 {
            return Err(Error::Config(format!(
                "input_dim {} must be divisible by tokens {}",
                self.input_dim, self.tokens
            )));
        }
        if self.heads < 1 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.blocks < 1 || self.mlp_hidden < 1 || self.classes < 1 {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.input_dim / self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Adapted sites: every block's q/k/v projection, in map order.
    pub fn sites(&self) -> Vec<SiteId> {
        let mut out = Vec::with_capacity(self.blocks * 3);
        for b in 0..self.blocks {
            for role in SiteRole::ALL {
                out.push(SiteId::new(b, role));
            }
        }
        out
    }

    /// Hash of the dimensions that determine weight shapes. `classes` is
    /// excluded so adapters stay loadable regardless of the head in use.
    pub fn structural_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"lora-compose.model.v1");
        for dim in [
            self.input_dim,
            self.tokens,
            self.d_model,
            self.heads,
            self.blocks,
            self.mlp_hidden,
        ] {
            hasher.update((dim as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
