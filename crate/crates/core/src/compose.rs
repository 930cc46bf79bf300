//! Merging N upstream adapter sets into one effective model.
//!
//! Two recipes: uniform averaging, `W0 + (1/N) sum alpha_n A_n B_n^T`, and a
//! learned convex combination, `W0 + sum softmax(v)_n alpha_n A_n B_n^T`,
//! with one logit vector per adapted site. Zero logits reproduce the uniform
//! recipe exactly, so learned composition always starts at uniform.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, SiteId};
use crate::math::{softmax, Matrix};

/// Per-site interpolation logits over N upstream tasks. Probabilities are
/// the softmax of each site's logits, aligned with `upstream_order`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionWeights {
    logits: BTreeMap<SiteId, Vec<f64>>,
    pub upstream_order: Vec<String>,
}

impl CompositionWeights {
    /// Zero logits at every site: the learned recipe starts exactly uniform.
    pub fn zeros(sites: &[SiteId], upstream_order: Vec<String>) -> Result<Self> {
        if upstream_order.is_empty() {
            return Err(Error::Argument(
                "composition needs at least one upstream task".into(),
            ));
        }
        let n = upstream_order.len();
        let logits = sites.iter().map(|&s| (s, vec![0.0; n])).collect();
        Ok(CompositionWeights {
            logits,
            upstream_order,
        })
    }

    pub fn n_upstream(&self) -> usize {
        self.upstream_order.len()
    }

    pub fn sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.logits.keys().copied()
    }

    pub fn logits(&self, site: SiteId) -> Result<&[f64]> {
        self.logits
            .get(&site)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no composition logits for site {site}")))
    }

    pub fn logits_mut(&mut self, site: SiteId) -> Result<&mut Vec<f64>> {
        self.logits
            .get_mut(&site)
            .ok_or_else(|| Error::Config(format!("no composition logits for site {site}")))
    }

    pub fn probabilities(&self, site: SiteId) -> Result<Vec<f64>> {
        softmax(self.logits(site)?)
    }

    /// Mean softmax weight of each upstream task across all sites.
    pub fn mean_weights(&self) -> Vec<f64> {
        let n = self.n_upstream();
        let mut acc = vec![0.0; n];
        for v in self.logits.values() {
            let p = softmax(v).expect("logit vectors are non-empty");
            for (a, x) in acc.iter_mut().zip(p) {
                *a += x;
            }
        }
        let sites = self.logits.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= sites);
        acc
    }

    /// Total trainable scalars: sites x N.
    pub fn param_count(&self) -> usize {
        self.logits.len() * self.n_upstream()
    }
}

/// `(1/N) sum_n alpha_n A_n B_n^T` for the adapters attached to one site.
///
/// Accumulated as `sum_n (1/N) * delta_n` in upstream order — the exact
/// arithmetic `learned_delta` performs at zero logits, where softmax gives
/// each task the same `1/N` weight. Zero-logit learned composition is
/// therefore bit-identical to uniform composition, not merely close.
pub fn uniform_delta(adapters: &[&LoraAdapter]) -> Result<Matrix> {
    if adapters.is_empty() {
        return Err(Error::Argument("uniform_delta of zero adapters".into()));
    }
    let inv_n = 1.0 / adapters.len() as f64;
    let shape = adapters[0].delta_weight().shape();
    let mut acc = Matrix::zeros(shape.0, shape.1);
    for ad in adapters {
        acc.add_scaled(&scaled_delta_checked(ad, shape)?, inv_n)?;
    }
    Ok(acc)
}

/// `sum_n softmax(v)_n alpha_n A_n B_n^T` for one site.
pub fn learned_delta(adapters: &[&LoraAdapter], v: &[f64]) -> Result<Matrix> {
    if adapters.is_empty() {
        return Err(Error::Argument("learned_delta of zero adapters".into()));
    }
    if v.len() != adapters.len() {
        return Err(Error::Argument(format!(
            "logit vector length {} does not match {} adapters",
            v.len(),
            adapters.len()
        )));
    }
    let p = softmax(v)?;
    let shape = adapters[0].delta_weight().shape();
    let mut acc = Matrix::zeros(shape.0, shape.1);
    for (ad, &w) in adapters.iter().zip(&p) {
        acc.add_scaled(&scaled_delta_checked(ad, shape)?, w)?;
    }
    Ok(acc)
}

fn scaled_delta_checked(ad: &LoraAdapter, expect: (usize, usize)) -> Result<Matrix> {
    let delta = ad.scaled_delta();
    if delta.shape() != expect {
        return Err(Error::shape(
            "composition",
            format!("{}x{}", expect.0, expect.1),
            format!("{}x{}", delta.rows(), delta.cols()),
        ));
    }
    Ok(delta)
}

/// Gradient of the loss w.r.t. one site's logits, given `g = dL/dW_hat`.
///
/// With `g_n = <g, alpha_n A_n B_n^T>` and `p = softmax(v)`:
/// `dv_n = p_n * (g_n - sum_j p_j g_j)` — the softmax Jacobian applied to
/// the per-adapter inner products. Entries always sum to zero.
pub fn grad_v(g: &Matrix, adapters: &[&LoraAdapter], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != adapters.len() {
        return Err(Error::Argument(format!(
            "logit vector length {} does not match {} adapters",
            v.len(),
            adapters.len()
        )));
    }
    let deltas: Vec<Matrix> = adapters.iter().map(|ad| ad.scaled_delta()).collect();
    grad_v_from_deltas(g, &deltas, v)
}

/// Same as [`grad_v`] but over pre-scaled deltas `alpha_n A_n B_n^T`.
pub fn grad_v_from_deltas(g: &Matrix, scaled_deltas: &[Matrix], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != scaled_deltas.len() {
        return Err(Error::Argument(format!(
            "logit vector length {} does not match {} deltas",
            v.len(),
            scaled_deltas.len()
        )));
    }
    let p = softmax(v)?;
    let mut inner = Vec::with_capacity(scaled_deltas.len());
    for d in scaled_deltas {
        inner.push(g.frob_inner(d)?);
    }
    let mean: f64 = p.iter().zip(&inner).map(|(&pj, &gj)| pj * gj).sum();
    Ok(p.iter()
        .zip(&inner)
        .map(|(&pn, &gn)| pn * (gn - mean))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ComposeMode {
    Uniform,
    Learned(CompositionWeights),
}

/// Snapshot of a composed model: one dense delta per adapted site, plus the
/// scaled per-upstream deltas it was built from so the logit gradient path
/// and cheap re-weighting never need the original adapter sets. The base
/// weights stay wherever they live; forward passes add these deltas on top.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedModel {
    pub deltas: BTreeMap<SiteId, Matrix>,
    pub upstream_deltas: BTreeMap<SiteId, Vec<Matrix>>,
    pub mode: ComposeMode,
    pub upstream_order: Vec<String>,
}

impl ComposedModel {
    pub fn delta(&self, site: SiteId) -> Result<&Matrix> {
        self.deltas
            .get(&site)
            .ok_or_else(|| Error::Config(format!("composed model missing site {site}")))
    }

    pub fn upstream_deltas(&self, site: SiteId) -> Result<&[Matrix]> {
        self.upstream_deltas
            .get(&site)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("composed model missing site {site}")))
    }

    pub fn weights(&self) -> Option<&CompositionWeights> {
        match &self.mode {
            ComposeMode::Learned(w) => Some(w),
            ComposeMode::Uniform => None,
        }
    }

    /// Recomputes the learned per-site deltas after a logit update. Only
    /// valid for learned mode; the stored upstream deltas are reused.
    pub fn set_weights(&mut self, weights: CompositionWeights) -> Result<()> {
        if weights.upstream_order != self.upstream_order {
            return Err(Error::Config(
                "replacement weights name different upstream tasks".into(),
            ));
        }
        for (site, ups) in &self.upstream_deltas {
            let v = weights.logits(*site)?;
            let p = softmax(v)?;
            let shape = ups[0].shape();
            let mut acc = Matrix::zeros(shape.0, shape.1);
            for (d, &w) in ups.iter().zip(&p) {
                acc.add_scaled(d, w)?;
            }
            self.deltas.insert(*site, acc);
        }
        self.mode = ComposeMode::Learned(weights);
        Ok(())
    }
}

/// Assembles per-site deltas from N upstream sets under the given mode.
/// Sets may have heterogeneous ranks; each must cover exactly `sites`.
pub fn compose_model(
    sites: &[SiteId],
    sets: &[AdapterSet],
    mode: ComposeMode,
) -> Result<ComposedModel> {
    if sets.is_empty() {
        return Err(Error::Argument("compose_model with zero upstream sets".into()));
    }
    for set in sets {
        set.check_covers(sites)?;
    }
    let upstream_order: Vec<String> = sets.iter().map(|s| s.provenance.clone()).collect();
    if let ComposeMode::Learned(w) = &mode {
        if w.upstream_order != upstream_order {
            return Err(Error::Config(format!(
                "composition weights are for upstreams {:?}, sets are {:?}",
                w.upstream_order, upstream_order
            )));
        }
        let weight_sites: Vec<SiteId> = w.sites().collect();
        if weight_sites != sites {
            return Err(Error::Config(
                "composition weights do not cover the model's adapted sites".into(),
            ));
        }
    }

    let mut deltas = BTreeMap::new();
    let mut upstream_deltas = BTreeMap::new();
    for &site in sites {
        let adapters: Vec<&LoraAdapter> = sets
            .iter()
            .map(|s| s.get(site))
            .collect::<Result<Vec<_>>>()?;
        let delta = match &mode {
            ComposeMode::Uniform => uniform_delta(&adapters)?,
            ComposeMode::Learned(w) => learned_delta(&adapters, w.logits(site)?)?,
        };
        deltas.insert(site, delta);
        upstream_deltas.insert(site, adapters.iter().map(|a| a.scaled_delta()).collect());
    }
    Ok(ComposedModel {
        deltas,
        upstream_deltas,
        mode,
        upstream_order,
    })
}
