//! Minibatch training loops.
//!
//! Three flavors share the Adam optimizer and seeded epoch shuffles:
//! - the full loop backpropagates through the whole network and updates
//!   whichever groups the mask enables;
//! - the head-only loop exploits frozen features: the pooled representation
//!   of every support point is computed once and the head trains as a
//!   linear model on top (identical gradients, orders of magnitude faster);
//! - the v-only loop is full-batch descent on the composition logits with a
//!   line-halving fallback, so its support loss never increases.

use crate::compose::ComposedModel;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::math::{cross_entropy, Matrix, RngStream};
use crate::model::{
    loss_and_grads, mean_loss, pooled_features, BaseModel, ClassifierHead, GradBundle, Overlay,
    TrainableMask,
};
use crate::train::adam::Adam;
use crate::train::hyper::Hyperparams;

/// The parameters one training run owns. Optional members exist only for
/// methods that train or evaluate through them.
#[derive(Debug, Clone)]
pub(crate) struct TrainableState {
    pub base: BaseModel,
    pub head: ClassifierHead,
    pub adapters: Option<AdapterSet>,
    pub composed: Option<ComposedModel>,
}

impl TrainableState {
    pub fn overlay(&self) -> Overlay<'_> {
        if let Some(set) = &self.adapters {
            Overlay::Adapter(set)
        } else if let Some(cm) = &self.composed {
            Overlay::Composed(cm)
        } else {
            Overlay::None
        }
    }
}

/// One full-backprop phase over a fixed mask.
pub(crate) struct FullPhase {
    mask: TrainableMask,
    adam: Adam,
    stream: RngStream,
    epoch: usize,
}

impl FullPhase {
    pub fn new(hp: &Hyperparams, mask: TrainableMask, stream: RngStream) -> Self {
        FullPhase {
            mask,
            adam: Adam::new(hp),
            stream,
            epoch: 0,
        }
    }

    /// One epoch of shuffled minibatches; returns the mean batch loss.
    pub fn epoch(
        &mut self,
        state: &mut TrainableState,
        hp: &Hyperparams,
        xs: &[Vec<f64>],
        ys: &[usize],
    ) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::Argument("training on an empty support set".into()));
        }
        let order = self
            .stream
            .substream(&format!("epoch{}", self.epoch))
            .permutation(xs.len());
        self.epoch += 1;
        let batch = hp.batch_size(xs.len());

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let (loss, bundle) =
                loss_and_grads(&state.base, &state.head, state.overlay(), &bx, &by, self.mask)?;
            self.apply(state, hp, &bundle)?;
            loss_sum += loss;
            batches += 1;
        }
        Ok(loss_sum / batches as f64)
    }

    /// Walks the enabled groups in a fixed order so Adam slot indices stay
    /// stable for the whole phase.
    fn apply(
        &mut self,
        state: &mut TrainableState,
        hp: &Hyperparams,
        bundle: &GradBundle,
    ) -> Result<()> {
        self.adam.begin_step();
        let mut slot = 0;
        if let Some(hg) = &bundle.head {
            self.adam
                .update(slot, state.head.w.data_mut(), hg.w.data(), hp.lr_head);
            slot += 1;
            self.adam.update(slot, &mut state.head.bias, &hg.bias, hp.lr_head);
            slot += 1;
        }
        if let Some(bg) = &bundle.base {
            let b = &mut state.base;
            self.adam
                .update(slot, b.patch_embed.data_mut(), bg.patch_embed.data(), hp.lr_base);
            slot += 1;
            self.adam
                .update(slot, b.pos_embed.data_mut(), bg.pos_embed.data(), hp.lr_base);
            slot += 1;
            for (blk, g) in b.blocks.iter_mut().zip(&bg.blocks) {
                self.adam.update(slot, &mut blk.attn_gain, &g.attn_gain, hp.lr_base);
                self.adam.update(slot + 1, blk.wq.data_mut(), g.wq.data(), hp.lr_base);
                self.adam.update(slot + 2, blk.wk.data_mut(), g.wk.data(), hp.lr_base);
                self.adam.update(slot + 3, blk.wv.data_mut(), g.wv.data(), hp.lr_base);
                self.adam.update(slot + 4, blk.wo.data_mut(), g.wo.data(), hp.lr_base);
                self.adam.update(slot + 5, &mut blk.mlp_gain, &g.mlp_gain, hp.lr_base);
                self.adam.update(slot + 6, blk.w1.data_mut(), g.w1.data(), hp.lr_base);
                self.adam.update(slot + 7, blk.w2.data_mut(), g.w2.data(), hp.lr_base);
                slot += 8;
            }
            self.adam
                .update(slot, &mut b.final_gain, &bg.final_gain, hp.lr_base);
            slot += 1;
        }
        if let Some(ag) = &bundle.adapters {
            let set = state
                .adapters
                .as_mut()
                .ok_or_else(|| Error::Config("adapter gradients without adapters".into()))?;
            for (site, (da, db)) in ag {
                let ad = set
                    .adapters
                    .get_mut(site)
                    .ok_or_else(|| Error::Config(format!("gradient for unknown site {site}")))?;
                self.adam.update(slot, ad.a.data_mut(), da.data(), hp.lr_adapters);
                self.adam
                    .update(slot + 1, ad.b.data_mut(), db.data(), hp.lr_adapters);
                slot += 2;
            }
        }
        if let Some(vg) = &bundle.composition_v {
            let cm = state
                .composed
                .as_mut()
                .ok_or_else(|| Error::Config("composition gradients without a composition".into()))?;
            let mut weights = cm
                .weights()
                .ok_or_else(|| Error::Config("composition gradients in uniform mode".into()))?
                .clone();
            if hp.per_site_weights {
                for (site, dv) in vg {
                    self.adam.update(slot, weights.logits_mut(*site)?, dv, hp.lr_v);
                    slot += 1;
                }
            } else {
                // tied logits: one shared vector, gradients summed over sites
                let sites: Vec<_> = weights.sites().collect();
                let n = weights.n_upstream();
                let mut summed = vec![0.0; n];
                for dv in vg.values() {
                    for (s, g) in summed.iter_mut().zip(dv) {
                        *s += g;
                    }
                }
                let mut shared = weights.logits(sites[0])?.to_vec();
                self.adam.update(slot, &mut shared, &summed, hp.lr_v);
                for site in sites {
                    weights.logits_mut(site)?.copy_from_slice(&shared);
                }
            }
            cm.set_weights(weights)?;
        }
        Ok(())
    }
}

pub(crate) fn run_full_phase(
    state: &mut TrainableState,
    mask: TrainableMask,
    epochs: usize,
    hp: &Hyperparams,
    stream: RngStream,
    xs: &[Vec<f64>],
    ys: &[usize],
) -> Result<()> {
    let mut phase = FullPhase::new(hp, mask, stream);
    for _ in 0..epochs {
        phase.epoch(state, hp, xs, ys)?;
    }
    Ok(())
}

/// Head-only training over frozen features. The base and overlay do not
/// change, so pooled features are computed once and the head trains as a
/// linear classifier with the same minibatch schedule and Adam settings.
pub(crate) fn run_head_phase(
    state: &mut TrainableState,
    epochs: usize,
    hp: &Hyperparams,
    stream: RngStream,
    xs: &[Vec<f64>],
    ys: &[usize],
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if xs.is_empty() {
        return Err(Error::Argument("training on an empty support set".into()));
    }
    let feats = pooled_features(&state.base, state.overlay(), xs)?;
    train_head_on_features(&mut state.head, &feats, ys, hp, epochs, stream)
}

pub(crate) fn train_head_on_features(
    head: &mut ClassifierHead,
    feats: &[Vec<f64>],
    ys: &[usize],
    hp: &Hyperparams,
    epochs: usize,
    stream: RngStream,
) -> Result<()> {
    let classes = head.classes();
    let dim = head.w.rows();
    let batch = hp.batch_size(feats.len());
    let mut adam = Adam::new(hp);
    let inv_batchf = |n: usize| 1.0 / n as f64;

    for epoch in 0..epochs {
        let order = stream.substream(&format!("epoch{epoch}")).permutation(feats.len());
        for chunk in order.chunks(batch) {
            let scale = inv_batchf(chunk.len());
            let mut dw = Matrix::zeros(dim, classes);
            let mut db = vec![0.0; classes];
            for &i in chunk {
                let f = &feats[i];
                let mut logits = head.bias.clone();
                for (j, &fj) in f.iter().enumerate() {
                    for (l, &w) in logits.iter_mut().zip(head.w.row(j)) {
                        *l += fj * w;
                    }
                }
                let (_, mut dlogits) = cross_entropy(&logits, ys[i])?;
                dlogits.iter_mut().for_each(|g| *g *= scale);
                for (j, &fj) in f.iter().enumerate() {
                    let row = dw.row_mut(j);
                    for (g, &dl) in row.iter_mut().zip(&dlogits) {
                        *g += fj * dl;
                    }
                }
                for (g, &dl) in db.iter_mut().zip(&dlogits) {
                    *g += dl;
                }
            }
            adam.begin_step();
            adam.update(0, head.w.data_mut(), dw.data(), hp.lr_head);
            adam.update(1, &mut head.bias, &db, hp.lr_head);
        }
    }
    Ok(())
}

/// Full-batch descent on the composition logits only. Each step takes the
/// gradient at the current point and halves the step size until the support
/// loss does not increase; if no halving helps the step is skipped. The
/// returned per-step loss trace is therefore monotonically non-increasing.
pub(crate) fn run_v_only_phase(
    state: &mut TrainableState,
    steps: usize,
    hp: &Hyperparams,
    xs: &[Vec<f64>],
    ys: &[usize],
) -> Result<Vec<f64>> {
    const MAX_HALVINGS: usize = 20;
    let mask = TrainableMask {
        composition_v: true,
        ..TrainableMask::NONE
    };
    let mut trace = Vec::with_capacity(steps + 1);
    let mut loss = mean_loss(&state.base, &state.head, state.overlay(), xs, ys)?;
    trace.push(loss);

    for _ in 0..steps {
        let (_, bundle) =
            loss_and_grads(&state.base, &state.head, state.overlay(), xs, ys, mask)?;
        let vg = bundle
            .composition_v
            .expect("v-only mask produces composition gradients");
        let current = state
            .composed
            .as_ref()
            .and_then(|cm| cm.weights())
            .ok_or_else(|| Error::Config("v-only phase needs a learned composition".into()))?
            .clone();

        let mut step_size = hp.lr_v;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let mut candidate = current.clone();
            if hp.per_site_weights {
                for (site, dv) in &vg {
                    let v = candidate.logits_mut(*site)?;
                    for (x, g) in v.iter_mut().zip(dv) {
                        *x -= step_size * g;
                    }
                }
            } else {
                let n = candidate.n_upstream();
                let mut summed = vec![0.0; n];
                for dv in vg.values() {
                    for (s, g) in summed.iter_mut().zip(dv) {
                        *s += g;
                    }
                }
                let sites: Vec<_> = candidate.sites().collect();
                let mut shared = candidate.logits(sites[0])?.to_vec();
                for (x, g) in shared.iter_mut().zip(&summed) {
                    *x -= step_size * g;
                }
                for site in sites {
                    candidate.logits_mut(site)?.copy_from_slice(&shared);
                }
            }
            state.composed.as_mut().expect("learned mode").set_weights(candidate)?;
            let new_loss = mean_loss(&state.base, &state.head, state.overlay(), xs, ys)?;
            if new_loss <= loss {
                loss = new_loss;
                accepted = true;
                break;
            }
            step_size *= 0.5;
            state
                .composed
                .as_mut()
                .expect("learned mode")
                .set_weights(current.clone())?;
        }
        if !accepted {
            // no improving step along the gradient; stop rather than thrash
            trace.push(loss);
            break;
        }
        trace.push(loss);
    }
    Ok(trace)
}
