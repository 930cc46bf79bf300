//! Parameter storage for the tiny transformer: the frozen-able base, the
//! per-task classifier head, and the trainable-group mask that defines each
//! adaptation method.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::lora::{SiteId, SiteRole};
use crate::math::{gaussian, Matrix, RngStream};
use crate::model::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_gain: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_gain: Vec<f64>,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// The base parameters (everything except the classifier head). Frozen in
/// every adaptation method except full fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub patch_embed: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Vec<f64>,
}

impl BaseModel {
    /// Weight matrices start at `Normal(0, 1/fan_in)`, norm gains at 1,
    /// positional embeddings at `Normal(0, 0.02^2)`.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std_in = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let patch_embed = gaussian(rng, config.patch_dim(), d, std_in(config.patch_dim()));
        let pos_embed = gaussian(rng, config.tokens, d, 0.02);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                attn_gain: vec![1.0; d],
                wq: gaussian(rng, d, d, std_in(d)),
                wk: gaussian(rng, d, d, std_in(d)),
                wv: gaussian(rng, d, d, std_in(d)),
                wo: gaussian(rng, d, d, std_in(d)),
                mlp_gain: vec![1.0; d],
                w1: gaussian(rng, d, config.mlp_hidden, std_in(d)),
                w2: gaussian(rng, config.mlp_hidden, d, std_in(config.mlp_hidden)),
            })
            .collect();
        Ok(BaseModel {
            config,
            patch_embed,
            pos_embed,
            blocks,
            final_gain: vec![1.0; d],
        })
    }

    pub fn sites(&self) -> Vec<SiteId> {
        self.config.sites()
    }

    pub fn site_weight(&self, site: SiteId) -> &Matrix {
        let block = &self.blocks[site.block];
        match site.role {
            SiteRole::Query => &block.wq,
            SiteRole::Key => &block.wk,
            SiteRole::Value => &block.wv,
        }
    }

    pub fn param_count(&self) -> usize {
        let c = &self.config;
        let d = c.d_model;
        let per_block = d + 4 * d * d + d + 2 * d * c.mlp_hidden;
        c.patch_dim() * d + c.tokens * d + c.blocks * per_block + d
    }

    /// SHA-256 over every parameter's little-endian bytes in declaration
    /// order; used by the freeze contract and checkpoint validation.
    pub fn weights_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut eat = |data: &[f64]| {
            for x in data {
                hasher.update(x.to_le_bytes());
            }
        };
        eat(self.patch_embed.data());
        eat(self.pos_embed.data());
        for b in &self.blocks {
            eat(&b.attn_gain);
            eat(b.wq.data());
            eat(b.wk.data());
            eat(b.wv.data());
            eat(b.wo.data());
            eat(&b.mlp_gain);
            eat(b.w1.data());
            eat(b.w2.data());
        }
        eat(&self.final_gain);
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Linear classifier over the pooled features. Trainable in every method
/// and excluded from the trainable-parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    /// Zero-initialized head: all classes start at equal logits.
    pub fn zeros(d_model: usize, classes: usize) -> Self {
        ClassifierHead {
            w: Matrix::zeros(d_model, classes),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Entrywise average of several heads (the zero-shot analog).
    pub fn average(heads: &[&ClassifierHead]) -> Result<ClassifierHead> {
        use crate::error::Error;
        let first = heads
            .first()
            .ok_or_else(|| Error::Argument("cannot average zero heads".into()))?;
        let mut w = first.w.clone();
        let mut bias = first.bias.clone();
        for h in &heads[1..] {
            if h.w.shape() != w.shape() {
                return Err(Error::shape(
                    "head_average",
                    format!("{}x{}", w.rows(), w.cols()),
                    format!("{}x{}", h.w.rows(), h.w.cols()),
                ));
            }
            w.add_scaled(&h.w, 1.0)?;
            for (b, x) in bias.iter_mut().zip(&h.bias) {
                *b += x;
            }
        }
        let n = heads.len() as f64;
        Ok(ClassifierHead {
            w: w.scale(1.0 / n),
            bias: bias.into_iter().map(|b| b / n).collect(),
        })
    }
}

/// Which parameter groups a training phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainableMask {
    pub base: bool,
    pub head: bool,
    pub adapters: bool,
    pub composition_v: bool,
}

impl TrainableMask {
    pub const HEAD_ONLY: TrainableMask = TrainableMask {
        base: false,
        head: true,
        adapters: false,
        composition_v: false,
    };
    pub const NONE: TrainableMask = TrainableMask {
        base: false,
        head: false,
        adapters: false,
        composition_v: false,
    };

    pub fn any_below_head(&self) -> bool {
        self.base || self.adapters || self.composition_v
    }
}

/// Trainable-parameter counts per group for a given mask. `theta()` is the
/// reported |Theta| column: everything except the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub base: usize,
    pub head: usize,
    pub adapters: usize,
    pub composition: usize,
}

impl ParamCounts {
    pub fn theta(&self) -> usize {
        self.base + self.adapters + self.composition
    }
}

/// Closed-form counts: base = all base params, adapters = sites * r * (d+c),
/// composition = sites * N per-site (N when the logits are tied globally).
pub fn param_counts(
    mask: TrainableMask,
    config: &ModelConfig,
    n_upstream: usize,
    rank: usize,
    per_site_v: bool,
) -> ParamCounts {
    let d = config.d_model;
    let sites = config.blocks * 3;
    let base_total = {
        let per_block = d + 4 * d * d + d + 2 * d * config.mlp_hidden;
        config.patch_dim() * d + config.tokens * d + config.blocks * per_block + d
    };
    ParamCounts {
        base: if mask.base { base_total } else { 0 },
        head: if mask.head {
            d * config.classes + config.classes
        } else {
            0
        },
        adapters: if mask.adapters { sites * rank * (d + d) } else { 0 },
        composition: if mask.composition_v {
            if per_site_v {
                sites * n_upstream
            } else {
                n_upstream
            }
        } else {
            0
        },
    }
}
