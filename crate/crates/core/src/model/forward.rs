//! Forward pass of the pre-norm transformer classifier.
//!
//! Layout per block: RMS-norm -> multi-head attention over q/k/v/o
//! projections with a residual, then RMS-norm -> GELU MLP with a residual.
//! A final RMS-norm, token mean-pool, and linear head produce the logits.
//! Tokens are row vectors, so a projection is `x_row * W` with `W` stored
//! input-dim x output-dim.
//!
//! The adapted q/k/v weights are resolved once per call from the overlay
//! (`W0`, `W0 + alpha A B^T`, or the composed delta) and the cache keeps
//! every intermediate the manual backward pass and the feature-similarity
//! analysis need.

use rayon::prelude::*;

use crate::compose::ComposedModel;
use crate::error::{Error, Result};
use crate::lora::{effective_weight, AdapterSet, SiteId, SiteRole};
use crate::math::{gelu, softmax_unchecked, Matrix};
use crate::model::config::ModelConfig;
use crate::model::params::{BaseModel, ClassifierHead};

pub const RMS_EPS: f64 = 1e-6;

/// What sits on top of the frozen base at the adapted sites.
#[derive(Debug, Clone, Copy)]
pub enum Overlay<'a> {
    None,
    Adapter(&'a AdapterSet),
    Composed(&'a ComposedModel),
}

/// Effective q/k/v weights per block after applying the overlay.
#[derive(Debug, Clone)]
pub struct ResolvedWeights {
    pub qkv: Vec<[Matrix; 3]>,
}

impl ResolvedWeights {
    pub fn site(&self, site: SiteId) -> &Matrix {
        &self.qkv[site.block][role_index(site.role)]
    }
}

pub(crate) fn role_index(role: SiteRole) -> usize {
    match role {
        SiteRole::Query => 0,
        SiteRole::Key => 1,
        SiteRole::Value => 2,
    }
}

/// Materializes the per-site effective weights. The base is never mutated.
pub fn resolve_weights(base: &BaseModel, overlay: Overlay<'_>) -> Result<ResolvedWeights> {
    let sites = base.sites();
    match overlay {
        Overlay::Adapter(set) => set.check_covers(&sites)?,
        Overlay::Composed(cm) => {
            let have: Vec<SiteId> = cm.deltas.keys().copied().collect();
            if have != sites {
                return Err(Error::Config(
                    "composed model does not cover the base model's adapted sites".into(),
                ));
            }
        }
        Overlay::None => {}
    }
    let mut qkv = Vec::with_capacity(base.blocks.len());
    for (b, _) in base.blocks.iter().enumerate() {
        let mut triple: Vec<Matrix> = Vec::with_capacity(3);
        for role in SiteRole::ALL {
            let site = SiteId::new(b, role);
            let w0 = base.site_weight(site);
            let w = match overlay {
                Overlay::None => w0.clone(),
                Overlay::Adapter(set) => effective_weight(w0, set.get(site)?)?,
                Overlay::Composed(cm) => {
                    let delta = cm.delta(site)?;
                    if delta.shape() != w0.shape() {
                        return Err(Error::shape(
                            "resolve_weights",
                            format!("{}x{}", w0.rows(), w0.cols()),
                            format!("{}x{}", delta.rows(), delta.cols()),
                        ));
                    }
                    w0.add(delta)?
                }
            };
            triple.push(w);
        }
        qkv.push([
            triple.remove(0),
            triple.remove(0),
            triple.remove(0),
        ]);
    }
    Ok(ResolvedWeights { qkv })
}

/// Per-block intermediates for one sample.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub h_in: Matrix,
    pub normed_attn: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmaxed attention scores, one tokens x tokens matrix per head.
    pub probs: Vec<Matrix>,
    pub attn_concat: Matrix,
    pub h_mid: Matrix,
    pub normed_mlp: Matrix,
    pub mlp_pre: Matrix,
    pub mlp_act: Matrix,
}

#[derive(Debug, Clone)]
pub struct SampleCache {
    pub patches: Matrix,
    pub blocks: Vec<BlockCache>,
    pub h_final: Matrix,
    pub normed_final: Matrix,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug)]
pub struct ForwardCache {
    pub weights: ResolvedWeights,
    pub samples: Vec<SampleCache>,
}

impl ForwardCache {
    /// Token-mean of one site's projection output for one sample; the
    /// feature vector the CKA analysis consumes.
    pub fn site_projection_mean(&self, sample: usize, site: SiteId) -> Result<Vec<f64>> {
        let cache = self
            .samples
            .get(sample)
            .ok_or_else(|| Error::Argument(format!("sample index {sample} out of range")))?;
        let block = cache
            .blocks
            .get(site.block)
            .ok_or_else(|| Error::Argument(format!("unknown site {site}")))?;
        let proj = match site.role {
            SiteRole::Query => &block.q,
            SiteRole::Key => &block.k,
            SiteRole::Value => &block.v,
        };
        Ok(token_mean(proj))
    }
}

fn token_mean(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for t in 0..m.rows() {
        for (o, &x) in out.iter_mut().zip(m.row(t)) {
            *o += x;
        }
    }
    let n = m.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Row-wise RMS norm with gain: `y = g .* x / sqrt(mean(x^2) + eps)`.
pub(crate) fn rms_norm_rows(x: &Matrix, gain: &[f64]) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        gain[j] * row[j] / (ms + RMS_EPS).sqrt()
    })
}

pub(crate) fn columns(m: &Matrix, c0: usize, width: usize) -> Matrix {
    Matrix::from_fn(m.rows(), width, |i, j| m.get(i, c0 + j))
}

pub(crate) fn add_columns(dst: &mut Matrix, src: &Matrix, c0: usize) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dst.set(i, c0 + j, dst.get(i, c0 + j) + src.get(i, j));
        }
    }
}

fn split_patches(config: &ModelConfig, x: &[f64]) -> Result<Matrix> {
    if x.len() != config.input_dim {
        return Err(Error::shape(
            "forward",
            format!("input of {}", x.len()),
            format!("input_dim {}", config.input_dim),
        ));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Argument("input entries must be finite".into()));
    }
    Matrix::from_vec(config.tokens, config.patch_dim(), x.to_vec())
}

pub(crate) fn forward_sample(
    base: &BaseModel,
    rw: &ResolvedWeights,
    head: &ClassifierHead,
    x: &[f64],
) -> Result<SampleCache> {
    let config = &base.config;
    let patches = split_patches(config, x)?;
    let mut h = patches.matmul(&base.patch_embed)?;
    h.add_scaled(&base.pos_embed, 1.0)?;

    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut blocks = Vec::with_capacity(config.blocks);
    for (b, params) in base.blocks.iter().enumerate() {
        let h_in = h;
        let normed_attn = rms_norm_rows(&h_in, &params.attn_gain);
        let q = normed_attn.matmul(&rw.qkv[b][0])?;
        let k = normed_attn.matmul(&rw.qkv[b][1])?;
        let v = normed_attn.matmul(&rw.qkv[b][2])?;

        let mut probs = Vec::with_capacity(config.heads);
        let mut attn_concat = Matrix::zeros(config.tokens, config.d_model);
        for head_idx in 0..config.heads {
            let c0 = head_idx * hd;
            let qh = columns(&q, c0, hd);
            let kh = columns(&k, c0, hd);
            let vh = columns(&v, c0, hd);
            let scores = qh.matmul(&kh.transpose())?.scale(scale);
            let mut p = Matrix::zeros(config.tokens, config.tokens);
            for t in 0..config.tokens {
                let soft = softmax_unchecked(scores.row(t));
                p.row_mut(t).copy_from_slice(&soft);
            }
            let oh = p.matmul(&vh)?;
            add_columns(&mut attn_concat, &oh, c0);
            probs.push(p);
        }
        let attn_out = attn_concat.matmul(&params.wo)?;
        let h_mid = h_in.add(&attn_out)?;

        let normed_mlp = rms_norm_rows(&h_mid, &params.mlp_gain);
        let mlp_pre = normed_mlp.matmul(&params.w1)?;
        let mlp_act = Matrix::from_fn(mlp_pre.rows(), mlp_pre.cols(), |i, j| gelu(mlp_pre.get(i, j)));
        let mlp_out = mlp_act.matmul(&params.w2)?;
        let h_out = h_mid.add(&mlp_out)?;

        blocks.push(BlockCache {
            h_in,
            normed_attn,
            q,
            k,
            v,
            probs,
            attn_concat,
            h_mid,
            normed_mlp,
            mlp_pre,
            mlp_act,
        });
        h = h_out;
    }

    let h_final = h;
    let normed_final = rms_norm_rows(&h_final, &base.final_gain);
    let pooled = token_mean(&normed_final);
    let mut logits = head.bias.clone();
    for (j, row) in (0..head.w.rows()).map(|j| (j, head.w.row(j))) {
        let p = pooled[j];
        for (l, &w) in logits.iter_mut().zip(row) {
            *l += p * w;
        }
    }

    Ok(SampleCache {
        patches,
        blocks,
        h_final,
        normed_final,
        pooled,
        logits,
    })
}

/// Forward over a batch, retaining the full activation cache.
pub fn forward(
    base: &BaseModel,
    head: &ClassifierHead,
    overlay: Overlay<'_>,
    xs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    if xs.is_empty() {
        return Err(Error::Argument("forward over an empty batch".into()));
    }
    let rw = resolve_weights(base, overlay)?;
    let samples: Vec<SampleCache> = xs
        .par_iter()
        .map(|x| forward_sample(base, &rw, head, x))
        .collect::<Result<Vec<_>>>()?;
    let logits = samples.iter().map(|s| s.logits.clone()).collect();
    Ok((
        logits,
        ForwardCache {
            weights: rw,
            samples,
        },
    ))
}

/// Pooled feature vector of every input, caches dropped as they are
/// produced. Head-only training runs on these frozen features.
pub fn pooled_features(
    base: &BaseModel,
    overlay: Overlay<'_>,
    xs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if xs.is_empty() {
        return Err(Error::Argument("feature extraction over an empty batch".into()));
    }
    let rw = resolve_weights(base, overlay)?;
    let probe_head = ClassifierHead::zeros(base.config.d_model, 1);
    xs.par_iter()
        .map(|x| forward_sample(base, &rw, &probe_head, x).map(|s| s.pooled))
        .collect()
}

/// Logits only; the per-sample caches are dropped as they are produced.
pub fn predict(
    base: &BaseModel,
    head: &ClassifierHead,
    overlay: Overlay<'_>,
    xs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if xs.is_empty() {
        return Err(Error::Argument("predict over an empty batch".into()));
    }
    let rw = resolve_weights(base, overlay)?;
    xs.par_iter()
        .map(|x| forward_sample(base, &rw, head, x).map(|s| s.logits))
        .collect()
}

/// Index of the largest logit; ties break toward the lowest class index.
pub fn argmax_lowest(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of query points whose argmax matches the label.
pub fn top1_accuracy(
    base: &BaseModel,
    head: &ClassifierHead,
    overlay: Overlay<'_>,
    xs: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Argument("accuracy over an empty query set".into()));
    }
    if xs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} inputs but {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let logits = predict(base, head, overlay, xs)?;
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| argmax_lowest(l) == y)
        .count();
    Ok(correct as f64 / xs.len() as f64)
}
