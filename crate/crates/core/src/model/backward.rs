//! Manually derived gradients for the tiny transformer.
//!
//! `loss_and_grads` runs the cached forward pass, takes the mean
//! cross-entropy over the batch, and backpropagates per sample. Per-sample
//! gradients are accumulated in ascending sample order so results are
//! bit-identical whether or not the per-sample work ran in parallel.
//!
//! The gradient at each adapted site is taken w.r.t. the *effective* weight
//! `W_hat`; the base group uses it directly (d W_hat / d W0 = I), the
//! adapter group routes it through `adapter_grad`, and the composition
//! group through `grad_v`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::compose::{grad_v_from_deltas, ComposeMode};
use crate::error::{Error, Result};
use crate::lora::{adapter_grad, SiteId, SiteRole};
use crate::math::{cross_entropy, gelu_grad, Matrix};
use crate::model::config::ModelConfig;
use crate::model::forward::{
    add_columns, columns, forward_sample, resolve_weights, ForwardCache, Overlay, SampleCache,
    RMS_EPS,
};
use crate::model::params::{BaseModel, ClassifierHead, TrainableMask};

/// Raw parameter gradients in the same layout as the parameters; the site
/// q/k/v entries hold `dL/dW_hat` for the effective weights.
#[derive(Debug, Clone)]
pub struct RawBlockGrads {
    pub attn_gain: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_gain: Vec<f64>,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone)]
pub struct RawGrads {
    pub patch_embed: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<RawBlockGrads>,
    pub final_gain: Vec<f64>,
    pub head_w: Matrix,
    pub head_bias: Vec<f64>,
}

impl RawGrads {
    fn zeros(config: &ModelConfig, classes: usize) -> Self {
        let d = config.d_model;
        RawGrads {
            patch_embed: Matrix::zeros(config.patch_dim(), d),
            pos_embed: Matrix::zeros(config.tokens, d),
            blocks: (0..config.blocks)
                .map(|_| RawBlockGrads {
                    attn_gain: vec![0.0; d],
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    mlp_gain: vec![0.0; d],
                    w1: Matrix::zeros(d, config.mlp_hidden),
                    w2: Matrix::zeros(config.mlp_hidden, d),
                })
                .collect(),
            final_gain: vec![0.0; d],
            head_w: Matrix::zeros(d, classes),
            head_bias: vec![0.0; classes],
        }
    }

    fn add(&mut self, other: &RawGrads) {
        fn addm(a: &mut Matrix, b: &Matrix) {
            a.add_scaled(b, 1.0).expect("identical layouts");
        }
        fn addv(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        addm(&mut self.patch_embed, &other.patch_embed);
        addm(&mut self.pos_embed, &other.pos_embed);
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            addv(&mut mine.attn_gain, &theirs.attn_gain);
            addm(&mut mine.wq, &theirs.wq);
            addm(&mut mine.wk, &theirs.wk);
            addm(&mut mine.wv, &theirs.wv);
            addm(&mut mine.wo, &theirs.wo);
            addv(&mut mine.mlp_gain, &theirs.mlp_gain);
            addm(&mut mine.w1, &theirs.w1);
            addm(&mut mine.w2, &theirs.w2);
        }
        addv(&mut self.final_gain, &other.final_gain);
        addm(&mut self.head_w, &other.head_w);
        addv(&mut self.head_bias, &other.head_bias);
    }

    pub fn site(&self, site: SiteId) -> &Matrix {
        let b = &self.blocks[site.block];
        match site.role {
            SiteRole::Query => &b.wq,
            SiteRole::Key => &b.wk,
            SiteRole::Value => &b.wv,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients for exactly the mask-enabled groups.
#[derive(Debug, Clone, Default)]
pub struct GradBundle {
    pub base: Option<RawGrads>,
    pub head: Option<HeadGrads>,
    pub adapters: Option<BTreeMap<SiteId, (Matrix, Matrix)>>,
    pub composition_v: Option<BTreeMap<SiteId, Vec<f64>>>,
}

impl GradBundle {
    pub fn is_empty(&self) -> bool {
        self.base.is_none()
            && self.head.is_none()
            && self.adapters.is_none()
            && self.composition_v.is_none()
    }
}

/// `dx` and `dgain` for `y = gain .* x / sqrt(mean(x^2) + eps)`, one row at
/// a time; `s` is recomputed from the cached input.
fn rms_backward_rows(x: &Matrix, gain: &[f64], dy: &Matrix, dgain: &mut [f64]) -> Matrix {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let row = x.row(t);
        let dy_row = dy.row(t);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let s = (ms + RMS_EPS).sqrt();
        let dot: f64 = (0..row.len()).map(|j| dy_row[j] * gain[j] * row[j]).sum();
        let dx_row = dx.row_mut(t);
        for j in 0..row.len() {
            dx_row[j] = gain[j] * dy_row[j] / s - row[j] * dot / (d * s * s * s);
            dgain[j] += dy_row[j] * row[j] / s;
        }
    }
    dx
}

/// Softmax-rows backward: `dS = P .* (dP - rowsum(dP .* P))`.
fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for t in 0..p.rows() {
        let p_row = p.row(t);
        let dp_row = dp.row(t);
        let dot: f64 = p_row.iter().zip(dp_row).map(|(&a, &b)| a * b).sum();
        let ds_row = ds.row_mut(t);
        for j in 0..p_row.len() {
            ds_row[j] = p_row[j] * (dp_row[j] - dot);
        }
    }
    ds
}

/// Backpropagates one sample given `dlogits`; writes parameter gradients
/// into `acc`. When `below_head` is false only the head gradients are
/// produced.
fn backward_sample(
    base: &BaseModel,
    rw: &crate::model::forward::ResolvedWeights,
    head: &ClassifierHead,
    cache: &SampleCache,
    dlogits: &[f64],
    acc: &mut RawGrads,
    below_head: bool,
) {
    let config = &base.config;
    let d = config.d_model;
    let tokens = config.tokens as f64;

    // head: logits = pooled * W + bias
    for j in 0..d {
        let p = cache.pooled[j];
        let row = acc.head_w.row_mut(j);
        for (g, &dl) in row.iter_mut().zip(dlogits) {
            *g += p * dl;
        }
    }
    for (g, &dl) in acc.head_bias.iter_mut().zip(dlogits) {
        *g += dl;
    }
    if !below_head {
        return;
    }

    // pooled = mean over token rows of normed_final
    let mut dpooled = vec![0.0; d];
    for (j, dp) in dpooled.iter_mut().enumerate() {
        *dp = head.w.row(j).iter().zip(dlogits).map(|(&w, &dl)| w * dl).sum();
    }
    let dnormed_final = Matrix::from_fn(config.tokens, d, |_, j| dpooled[j] / tokens);
    let mut dh = rms_backward_rows(
        &cache.h_final,
        &base.final_gain,
        &dnormed_final,
        &mut acc.final_gain,
    );

    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    for (b, params) in base.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[b];
        let bg = &mut acc.blocks[b];

        // h_out = h_mid + gelu(normed_mlp * W1) * W2
        let dmlp_out = &dh; // residual: dh flows to both branches
        bg.w2
            .add_scaled(&bc.mlp_act.transpose().matmul(dmlp_out).unwrap(), 1.0)
            .unwrap();
        let dact = dmlp_out.matmul(&params.w2.transpose()).unwrap();
        let dpre = Matrix::from_fn(dact.rows(), dact.cols(), |i, j| {
            dact.get(i, j) * gelu_grad(bc.mlp_pre.get(i, j))
        });
        bg.w1
            .add_scaled(&bc.normed_mlp.transpose().matmul(&dpre).unwrap(), 1.0)
            .unwrap();
        let dnormed_mlp = dpre.matmul(&params.w1.transpose()).unwrap();
        let mut dh_mid = rms_backward_rows(&bc.h_mid, &params.mlp_gain, &dnormed_mlp, &mut bg.mlp_gain);
        dh_mid.add_scaled(&dh, 1.0).unwrap();

        // h_mid = h_in + attn_concat * Wo
        bg.wo
            .add_scaled(&bc.attn_concat.transpose().matmul(&dh_mid).unwrap(), 1.0)
            .unwrap();
        let dconcat = dh_mid.matmul(&params.wo.transpose()).unwrap();

        let mut dq = Matrix::zeros(config.tokens, d);
        let mut dk = Matrix::zeros(config.tokens, d);
        let mut dv = Matrix::zeros(config.tokens, d);
        for head_idx in 0..config.heads {
            let c0 = head_idx * hd;
            let doh = columns(&dconcat, c0, hd);
            let p = &bc.probs[head_idx];
            let vh = columns(&bc.v, c0, hd);
            let qh = columns(&bc.q, c0, hd);
            let kh = columns(&bc.k, c0, hd);

            let dvh = p.transpose().matmul(&doh).unwrap();
            let dp = doh.matmul(&vh.transpose()).unwrap();
            let ds = softmax_rows_backward(p, &dp);
            let dqh = ds.matmul(&kh).unwrap().scale(scale);
            let dkh = ds.transpose().matmul(&qh).unwrap().scale(scale);

            add_columns(&mut dq, &dqh, c0);
            add_columns(&mut dk, &dkh, c0);
            add_columns(&mut dv, &dvh, c0);
        }

        // projections: q = normed_attn * W_hat_q etc.
        let nt = bc.normed_attn.transpose();
        bg.wq.add_scaled(&nt.matmul(&dq).unwrap(), 1.0).unwrap();
        bg.wk.add_scaled(&nt.matmul(&dk).unwrap(), 1.0).unwrap();
        bg.wv.add_scaled(&nt.matmul(&dv).unwrap(), 1.0).unwrap();

        let mut dnormed_attn = dq.matmul(&rw.qkv[b][0].transpose()).unwrap();
        dnormed_attn
            .add_scaled(&dk.matmul(&rw.qkv[b][1].transpose()).unwrap(), 1.0)
            .unwrap();
        dnormed_attn
            .add_scaled(&dv.matmul(&rw.qkv[b][2].transpose()).unwrap(), 1.0)
            .unwrap();

        let mut dh_in =
            rms_backward_rows(&bc.h_in, &params.attn_gain, &dnormed_attn, &mut bg.attn_gain);
        dh_in.add_scaled(&dh_mid, 1.0).unwrap(); // residual
        dh = dh_in;
    }

    // tokens = patches * patch_embed + pos_embed
    acc.pos_embed.add_scaled(&dh, 1.0).unwrap();
    acc.patch_embed
        .add_scaled(&cache.patches.transpose().matmul(&dh).unwrap(), 1.0)
        .unwrap();
}

/// Mean cross-entropy over the batch plus gradients for the mask-enabled
/// groups. With an all-off mask the bundle is empty but the loss is still
/// returned.
pub fn loss_and_grads(
    base: &BaseModel,
    head: &ClassifierHead,
    overlay: Overlay<'_>,
    xs: &[Vec<f64>],
    labels: &[usize],
    mask: TrainableMask,
) -> Result<(f64, GradBundle)> {
    let (loss, raw, _) = loss_and_raw_grads(base, head, overlay, xs, labels, mask)?;
    let Some(raw) = raw else {
        return Ok((loss, GradBundle::default()));
    };

    let mut bundle = GradBundle::default();
    if mask.head {
        bundle.head = Some(HeadGrads {
            w: raw.head_w.clone(),
            bias: raw.head_bias.clone(),
        });
    }
    if mask.adapters {
        let Overlay::Adapter(set) = overlay else {
            return Err(Error::Config(
                "adapter gradients requested without an adapter overlay".into(),
            ));
        };
        let mut grads = BTreeMap::new();
        for site in base.sites() {
            grads.insert(site, adapter_grad(raw.site(site), set.get(site)?)?);
        }
        bundle.adapters = Some(grads);
    }
    if mask.composition_v {
        let Overlay::Composed(cm) = overlay else {
            return Err(Error::Config(
                "composition gradients requested without a composed overlay".into(),
            ));
        };
        let ComposeMode::Learned(weights) = &cm.mode else {
            return Err(Error::Config(
                "composition gradients requested for uniform composition".into(),
            ));
        };
        let mut grads = BTreeMap::new();
        for site in base.sites() {
            let dv = grad_v_from_deltas(
                raw.site(site),
                cm.upstream_deltas(site)?,
                weights.logits(site)?,
            )?;
            grads.insert(site, dv);
        }
        bundle.composition_v = Some(grads);
    }
    if mask.base {
        bundle.base = Some(raw);
    }
    Ok((loss, bundle))
}

/// Shared core: mean loss, summed raw gradients (when any group is
/// enabled), and the forward cache.
pub(crate) fn loss_and_raw_grads(
    base: &BaseModel,
    head: &ClassifierHead,
    overlay: Overlay<'_>,
    xs: &[Vec<f64>],
    labels: &[usize],
    mask: TrainableMask,
) -> Result<(f64, Option<RawGrads>, ForwardCache)> {
    if xs.is_empty() {
        return Err(Error::Argument("loss over an empty batch".into()));
    }
    if xs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} inputs but {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let classes = head.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let rw = resolve_weights(base, overlay)?;
    let below_head = mask.any_below_head();
    let want_grads = below_head || mask.head;
    let inv_batch = 1.0 / xs.len() as f64;

    // Per-sample loss and (optionally) gradients, then an in-order reduce.
    let per_sample: Vec<(f64, Option<RawGrads>, SampleCache)> = xs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| {
            let cache = forward_sample(base, &rw, head, x)?;
            let (loss, mut dlogits) = cross_entropy(&cache.logits, y)?;
            let grads = if want_grads {
                dlogits.iter_mut().for_each(|g| *g *= inv_batch);
                let mut acc = RawGrads::zeros(&base.config, classes);
                backward_sample(base, &rw, head, &cache, &dlogits, &mut acc, below_head);
                Some(acc)
            } else {
                None
            };
            Ok((loss, grads, cache))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss = 0.0;
    let mut total: Option<RawGrads> = None;
    let mut samples = Vec::with_capacity(per_sample.len());
    for (l, grads, cache) in per_sample {
        loss += l;
        if let Some(g) = grads {
            match &mut total {
                Some(t) => t.add(&g),
                None => total = Some(g),
            }
        }
        samples.push(cache);
    }
    Ok((
        loss * inv_batch,
        total,
        ForwardCache {
            weights: rw,
            samples,
        },
    ))
}

/// Mean cross-entropy without any gradients.
pub fn mean_loss(
    base: &BaseModel,
    head: &ClassifierHead,
    overlay: Overlay<'_>,
    xs: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    let (loss, _, _) = loss_and_raw_grads(base, head, overlay, xs, labels, TrainableMask::NONE)?;
    Ok(loss)
}
