//! Low-rank adapters: one trainable delta `A * B^T` per frozen weight site.
//!
//! An adapter never owns the base weight it decorates. `delta_weight` is the
//! bare product; the `alpha` scaling is applied by [`effective_weight`] and
//! by the composition code, so mixed-alpha algebra stays explicit.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{gaussian, Matrix, RngStream};

/// Which projection of a transformer block an adapter attaches to.
/// Only the attention q/k/v projections are ever adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteRole {
    Query,
    Key,
    Value,
}

impl SiteRole {
    pub const ALL: [SiteRole; 3] = [SiteRole::Query, SiteRole::Key, SiteRole::Value];

    pub fn tag(&self) -> &'static str {
        match self {
            SiteRole::Query => "q",
            SiteRole::Key => "k",
            SiteRole::Value => "v",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "q" => Ok(SiteRole::Query),
            "k" => Ok(SiteRole::Key),
            "v" => Ok(SiteRole::Value),
            other => Err(Error::Argument(format!("unknown site role {other:?}"))),
        }
    }
}

/// Identifies one adapted weight matrix: block index plus projection role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub block: usize,
    pub role: SiteRole,
}

impl SiteId {
    pub fn new(block: usize, role: SiteRole) -> Self {
        SiteId { block, role }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.role.tag())
    }
}

/// One low-rank delta attached to a `d x c` frozen weight: `A` is `d x r`,
/// `B` is `c x r`, so `delta = A * B^T` is `d x c` for any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.cols() != b.cols() {
            return Err(Error::shape(
                "lora_adapter",
                format!("A {}x{}", a.rows(), a.cols()),
                format!("B {}x{}", b.rows(), b.cols()),
            ));
        }
        let rank = a.cols();
        if rank > a.rows().min(b.rows()) {
            return Err(Error::Argument(format!(
                "rank {rank} exceeds min(d={}, c={})",
                a.rows(),
                b.rows()
            )));
        }
        Ok(LoraAdapter { a, b, alpha, rank })
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.b.rows()
    }

    /// Bare low-rank product `A * B^T` (no alpha).
    pub fn delta_weight(&self) -> Matrix {
        self.a
            .matmul(&self.b.transpose())
            .expect("adapter invariant: A cols == B cols")
    }

    /// `alpha * A * B^T`, the term that enters every composition formula.
    pub fn scaled_delta(&self) -> Matrix {
        self.delta_weight().scale(self.alpha)
    }
}

/// Fresh adapter for a `d x c` site: `A ~ Normal(0, 0.02^2)`, `B = 0`.
/// The zero `B` makes the initial delta exactly zero, so fine-tuning starts
/// at the frozen model.
pub fn init_adapter(
    d: usize,
    c: usize,
    rank: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<LoraAdapter> {
    if rank < 1 || rank > d.min(c) {
        return Err(Error::Argument(format!(
            "rank must satisfy 1 <= r <= min(d={d}, c={c}), got {rank}"
        )));
    }
    let a = gaussian(rng, d, rank, ADAPTER_INIT_SIGMA);
    let b = Matrix::zeros(c, rank);
    LoraAdapter::new(a, b, alpha)
}

pub const ADAPTER_INIT_SIGMA: f64 = 0.02;

/// `W0 + alpha * A * B^T`; `w0` is never mutated.
pub fn effective_weight(w0: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    let delta = adapter.delta_weight();
    if w0.shape() != delta.shape() {
        return Err(Error::shape(
            "effective_weight",
            format!("{}x{}", w0.rows(), w0.cols()),
            format!("{}x{}", delta.rows(), delta.cols()),
        ));
    }
    let mut out = w0.clone();
    out.add_scaled(&delta, adapter.alpha)?;
    Ok(out)
}

/// Chain rule through `W_hat = W0 + alpha * A * B^T` given the upstream
/// gradient `g = dL/dW_hat`: `dA = alpha * g * B`, `dB = alpha * g^T * A`.
pub fn adapter_grad(g: &Matrix, adapter: &LoraAdapter) -> Result<(Matrix, Matrix)> {
    if g.shape() != (adapter.out_dim(), adapter.in_dim()) {
        return Err(Error::shape(
            "adapter_grad",
            format!("{}x{}", g.rows(), g.cols()),
            format!("{}x{}", adapter.out_dim(), adapter.in_dim()),
        ));
    }
    let da = g.matmul(&adapter.b)?.scale(adapter.alpha);
    let db = g.transpose().matmul(&adapter.a)?.scale(adapter.alpha);
    Ok((da, db))
}

/// Every adapter one upstream task produced: one per adapted site, all
/// sharing one alpha and (within a set) one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub adapters: BTreeMap<SiteId, LoraAdapter>,
    /// Upstream task the set was trained on.
    pub provenance: String,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterSet {
    pub fn new(
        adapters: BTreeMap<SiteId, LoraAdapter>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut iter = adapters.values();
        let first = iter
            .next()
            .ok_or_else(|| Error::Argument("adapter set must not be empty".into()))?;
        let (rank, alpha) = (first.rank, first.alpha);
        if adapters.values().any(|a| a.alpha != alpha) {
            return Err(Error::Config(
                "all adapters in a set must share one alpha".into(),
            ));
        }
        if adapters.values().any(|a| a.rank != rank) {
            return Err(Error::Config(
                "all adapters in a set must share one rank".into(),
            ));
        }
        Ok(AdapterSet {
            adapters,
            provenance: provenance.into(),
            rank,
            alpha,
        })
    }

    pub fn sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.adapters.keys().copied()
    }

    pub fn get(&self, site: SiteId) -> Result<&LoraAdapter> {
        self.adapters
            .get(&site)
            .ok_or_else(|| Error::Config(format!("adapter set missing site {site}")))
    }

    /// Checks the set covers exactly the given sites.
    pub fn check_covers(&self, sites: &[SiteId]) -> Result<()> {
        let have: Vec<SiteId> = self.sites().collect();
        if have != sites {
            return Err(Error::Config(format!(
                "adapter set {:?} covers {:?}, model expects {:?}",
                self.provenance,
                have.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                sites.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            )));
        }
        Ok(())
    }
}
