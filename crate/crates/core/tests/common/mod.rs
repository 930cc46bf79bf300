//! Shared fixtures for integration tests: a micro model, random adapter
//! sets, and a flatten/scatter view of the trainable parameter vector used
//! by the finite-difference gradient oracle.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lora_compose::compose::{compose_model, ComposeMode, CompositionWeights};
use lora_compose::lora::{AdapterSet, LoraAdapter};
use lora_compose::math::{gaussian, Matrix, RngStream};
use lora_compose::model::{
    loss_and_grads, mean_loss, BaseModel, ClassifierHead, GradBundle, ModelConfig, Overlay,
    TrainableMask,
};

pub fn micro_base(seed: u64) -> BaseModel {
    BaseModel::init(ModelConfig::micro(), &mut RngStream::from_seed(seed)).unwrap()
}

pub fn random_head(cfg: &ModelConfig, rng: &mut RngStream) -> ClassifierHead {
    ClassifierHead {
        w: gaussian(rng, cfg.d_model, cfg.classes, 0.5),
        bias: (0..cfg.classes).map(|_| rng.normal(0.1)).collect(),
    }
}

pub fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut RngStream) -> (Vec<Vec<f64>>, Vec<usize>) {
    let xs = (0..n)
        .map(|_| (0..cfg.input_dim).map(|_| rng.normal(1.0)).collect())
        .collect();
    let labels = (0..n).map(|i| i % cfg.classes).collect();
    (xs, labels)
}

pub fn random_adapter_set(
    base: &BaseModel,
    rank: usize,
    alpha: f64,
    name: &str,
    rng: &mut RngStream,
) -> AdapterSet {
    let d = base.config.d_model;
    let map: BTreeMap<_, _> = base
        .sites()
        .into_iter()
        .map(|s| {
            let ad = LoraAdapter::new(
                gaussian(rng, d, rank, 0.3),
                gaussian(rng, d, rank, 0.3),
                alpha,
            )
            .unwrap();
            (s, ad)
        })
        .collect();
    AdapterSet::new(map, name).unwrap()
}

/// What sits on top of the base for a gradient-check scenario.
#[derive(Clone)]
pub enum OverlayParams {
    None,
    Adapter(AdapterSet),
    Learned {
        sets: Vec<AdapterSet>,
        weights: CompositionWeights,
    },
}

/// One differentiable configuration: model parameters plus a mask choosing
/// which groups count as the parameter vector theta.
#[derive(Clone)]
pub struct Scenario {
    pub base: BaseModel,
    pub head: ClassifierHead,
    pub overlay: OverlayParams,
    pub mask: TrainableMask,
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Scenario {
    pub fn loss(&self) -> f64 {
        match &self.overlay {
            OverlayParams::None => {
                mean_loss(&self.base, &self.head, Overlay::None, &self.xs, &self.labels).unwrap()
            }
            OverlayParams::Adapter(set) => mean_loss(
                &self.base,
                &self.head,
                Overlay::Adapter(set),
                &self.xs,
                &self.labels,
            )
            .unwrap(),
            OverlayParams::Learned { sets, weights } => {
                let cm = compose_model(
                    &self.base.sites(),
                    sets,
                    ComposeMode::Learned(weights.clone()),
                )
                .unwrap();
                mean_loss(
                    &self.base,
                    &self.head,
                    Overlay::Composed(&cm),
                    &self.xs,
                    &self.labels,
                )
                .unwrap()
            }
        }
    }

    pub fn grads(&self) -> GradBundle {
        let (_, bundle) = match &self.overlay {
            OverlayParams::None => loss_and_grads(
                &self.base,
                &self.head,
                Overlay::None,
                &self.xs,
                &self.labels,
                self.mask,
            )
            .unwrap(),
            OverlayParams::Adapter(set) => loss_and_grads(
                &self.base,
                &self.head,
                Overlay::Adapter(set),
                &self.xs,
                &self.labels,
                self.mask,
            )
            .unwrap(),
            OverlayParams::Learned { sets, weights } => {
                let cm = compose_model(
                    &self.base.sites(),
                    sets,
                    ComposeMode::Learned(weights.clone()),
                )
                .unwrap();
                loss_and_grads(
                    &self.base,
                    &self.head,
                    Overlay::Composed(&cm),
                    &self.xs,
                    &self.labels,
                    self.mask,
                )
                .unwrap()
            }
        };
        bundle
    }

    /// The enabled parameter groups as one flat vector. Order: base (patch,
    /// pos, per block gain/q/k/v/o/gain/w1/w2, final gain), head (w, bias),
    /// adapters (per site A then B), composition logits (per site).
    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.mask.base {
            let b = &self.base;
            out.extend_from_slice(b.patch_embed.data());
            out.extend_from_slice(b.pos_embed.data());
            for blk in &b.blocks {
                out.extend_from_slice(&blk.attn_gain);
                out.extend_from_slice(blk.wq.data());
                out.extend_from_slice(blk.wk.data());
                out.extend_from_slice(blk.wv.data());
                out.extend_from_slice(blk.wo.data());
                out.extend_from_slice(&blk.mlp_gain);
                out.extend_from_slice(blk.w1.data());
                out.extend_from_slice(blk.w2.data());
            }
            out.extend_from_slice(&b.final_gain);
        }
        if self.mask.head {
            out.extend_from_slice(self.head.w.data());
            out.extend_from_slice(&self.head.bias);
        }
        if self.mask.adapters {
            let OverlayParams::Adapter(set) = &self.overlay else {
                panic!("adapter mask without adapter overlay");
            };
            for ad in set.adapters.values() {
                out.extend_from_slice(ad.a.data());
                out.extend_from_slice(ad.b.data());
            }
        }
        if self.mask.composition_v {
            let OverlayParams::Learned { weights, .. } = &self.overlay else {
                panic!("composition mask without learned overlay");
            };
            let sites: Vec<_> = weights.sites().collect();
            for site in sites {
                out.extend_from_slice(weights.logits(site).unwrap());
            }
        }
        out
    }

    /// The analytic gradient in the same flat order as [`Self::theta`].
    pub fn grad_vec(&self) -> Vec<f64> {
        let bundle = self.grads();
        let mut out = Vec::new();
        if self.mask.base {
            let g = bundle.base.as_ref().expect("base grads");
            out.extend_from_slice(g.patch_embed.data());
            out.extend_from_slice(g.pos_embed.data());
            for blk in &g.blocks {
                out.extend_from_slice(&blk.attn_gain);
                out.extend_from_slice(blk.wq.data());
                out.extend_from_slice(blk.wk.data());
                out.extend_from_slice(blk.wv.data());
                out.extend_from_slice(blk.wo.data());
                out.extend_from_slice(&blk.mlp_gain);
                out.extend_from_slice(blk.w1.data());
                out.extend_from_slice(blk.w2.data());
            }
            out.extend_from_slice(&g.final_gain);
        }
        if self.mask.head {
            let g = bundle.head.as_ref().expect("head grads");
            out.extend_from_slice(g.w.data());
            out.extend_from_slice(&g.bias);
        }
        if self.mask.adapters {
            let g = bundle.adapters.as_ref().expect("adapter grads");
            for (da, db) in g.values() {
                out.extend_from_slice(da.data());
                out.extend_from_slice(db.data());
            }
        }
        if self.mask.composition_v {
            let g = bundle.composition_v.as_ref().expect("composition grads");
            for dv in g.values() {
                out.extend_from_slice(dv);
            }
        }
        out
    }

    /// A copy of the scenario with the enabled groups replaced by `theta`.
    pub fn with_theta(&self, theta: &[f64]) -> Scenario {
        fn take(theta: &[f64], pos: &mut usize, n: usize) -> Vec<f64> {
            let v = theta[*pos..*pos + n].to_vec();
            *pos += n;
            v
        }
        fn replace(theta: &[f64], pos: &mut usize, m: &mut Matrix) {
            let (rows, cols) = m.shape();
            let v = take(theta, pos, rows * cols);
            *m = Matrix::from_vec(rows, cols, v).unwrap();
        }
        fn replace_vec(theta: &[f64], pos: &mut usize, v: &mut Vec<f64>) {
            *v = take(theta, pos, v.len());
        }

        let mut s = self.clone();
        let mut pos = 0;
        if s.mask.base {
            let b = &mut s.base;
            replace(theta, &mut pos, &mut b.patch_embed);
            replace(theta, &mut pos, &mut b.pos_embed);
            for blk in &mut b.blocks {
                replace_vec(theta, &mut pos, &mut blk.attn_gain);
                replace(theta, &mut pos, &mut blk.wq);
                replace(theta, &mut pos, &mut blk.wk);
                replace(theta, &mut pos, &mut blk.wv);
                replace(theta, &mut pos, &mut blk.wo);
                replace_vec(theta, &mut pos, &mut blk.mlp_gain);
                replace(theta, &mut pos, &mut blk.w1);
                replace(theta, &mut pos, &mut blk.w2);
            }
            replace_vec(theta, &mut pos, &mut b.final_gain);
        }
        if s.mask.head {
            replace(theta, &mut pos, &mut s.head.w);
            replace_vec(theta, &mut pos, &mut s.head.bias);
        }
        if s.mask.adapters {
            let OverlayParams::Adapter(set) = &mut s.overlay else {
                panic!("adapter mask without adapter overlay");
            };
            for ad in set.adapters.values_mut() {
                replace(theta, &mut pos, &mut ad.a);
                replace(theta, &mut pos, &mut ad.b);
            }
        }
        if s.mask.composition_v {
            let OverlayParams::Learned { weights, .. } = &mut s.overlay else {
                panic!("composition mask without learned overlay");
            };
            let sites: Vec<_> = weights.sites().collect();
            for site in sites {
                let v = weights.logits_mut(site).unwrap();
                let fresh = take(theta, &mut pos, v.len());
                v.copy_from_slice(&fresh);
            }
        }
        assert_eq!(pos, theta.len(), "theta length mismatch");
        s
    }
}

/// Max relative error of the directional derivative against central finite
/// differences over `n_dirs` random unit directions.
pub fn directional_check(scenario: &Scenario, n_dirs: usize, seed: u64) -> f64 {
    let theta = scenario.theta();
    let grad = scenario.grad_vec();
    assert_eq!(theta.len(), grad.len());
    let mut rng = RngStream::from_seed(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..n_dirs {
        let mut dir: Vec<f64> = (0..theta.len()).map(|_| rng.standard_normal()).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);

        let analytic: f64 = grad.iter().zip(&dir).map(|(g, u)| g * u).sum();
        let plus: Vec<f64> = theta.iter().zip(&dir).map(|(t, u)| t + h * u).collect();
        let minus: Vec<f64> = theta.iter().zip(&dir).map(|(t, u)| t - h * u).collect();
        let fd = (scenario.with_theta(&plus).loss() - scenario.with_theta(&minus).loss())
            / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
