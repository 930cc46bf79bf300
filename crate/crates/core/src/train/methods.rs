//! The adaptation-method registry.
//!
//! Every few-shot adaptation method implements [`AdaptStrategy`] and is
//! registered by name; run configs and the CLI select methods at runtime by
//! string. All trainable methods share the same protocol skeleton: a
//! zero-initialized head, a head-only warm-up on the support set, then the
//! method's own trainable groups for the remaining epochs.

use crate::compose::{compose_model, ComposeMode, CompositionWeights};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, AdapterSet};
use crate::math::RngStream;
use crate::model::{
    param_counts, top1_accuracy, BaseModel, ClassifierHead, ModelConfig, Overlay, TrainableMask,
};
use crate::tasks::{Episode, SuiteSpec};
use crate::train::engine::{run_full_phase, run_head_phase, run_v_only_phase, TrainableState};
use crate::train::hyper::Hyperparams;
use crate::train::protocol::TrainedUpstream;

/// Everything a strategy needs to adapt to one episode.
pub struct AdaptContext<'a> {
    pub base: &'a BaseModel,
    pub upstream: &'a [TrainedUpstream],
    pub suite: &'a SuiteSpec,
    pub episode: &'a Episode,
    pub hp: &'a Hyperparams,
    /// Rank for adapters trained from scratch at adaptation time.
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl AdaptContext<'_> {
    fn classes(&self) -> usize {
        self.suite.downstream.classes()
    }

    /// Method-independent: methods at the same (k, seed) share warm-up and
    /// epoch shuffles, so method comparisons stay paired beyond the episode.
    fn stream(&self) -> RngStream {
        RngStream::from_seed(self.seed).substream(&format!("adapt.k{}", self.episode.k))
    }

    fn require_support(&self) -> Result<()> {
        if self.episode.support_x.is_empty() {
            return Err(Error::Argument(
                "trainable methods need a non-empty support set (k >= 1)".into(),
            ));
        }
        Ok(())
    }

    fn require_upstream(&self) -> Result<()> {
        if self.upstream.is_empty() {
            return Err(Error::Argument(
                "composition methods need at least one upstream adapter set".into(),
            ));
        }
        Ok(())
    }

    fn upstream_sets(&self) -> Vec<AdapterSet> {
        self.upstream.iter().map(|u| u.set.clone()).collect()
    }

    /// Warm-up epochs first, the rest for the method phase.
    fn split_epochs(&self) -> (usize, usize) {
        let total = self.hp.adaptation_epochs;
        let warmup = self.hp.warmup_epochs.min(total);
        (warmup, total - warmup)
    }
}

/// The model an adaptation produced, ready for evaluation.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub base: BaseModel,
    pub head: ClassifierHead,
    pub adapters: Option<AdapterSet>,
    pub composed: Option<crate::compose::ComposedModel>,
    /// Final composition weights, for reports and heatmaps.
    pub weights: Option<CompositionWeights>,
    pub theta: usize,
}

impl AdaptedModel {
    pub fn overlay(&self) -> Overlay<'_> {
        if let Some(set) = &self.adapters {
            Overlay::Adapter(set)
        } else if let Some(cm) = &self.composed {
            Overlay::Composed(cm)
        } else {
            Overlay::None
        }
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
        top1_accuracy(&self.base, &self.head, self.overlay(), xs, ys)
    }

    fn from_state(state: TrainableState, weights: Option<CompositionWeights>, theta: usize) -> Self {
        AdaptedModel {
            base: state.base,
            head: state.head,
            adapters: state.adapters,
            composed: state.composed,
            weights,
            theta,
        }
    }
}

/// One few-shot adaptation method behind a common interface.
pub trait AdaptStrategy: Sync {
    fn name(&self) -> &'static str;

    /// Trainable groups during the method phase (after warm-up).
    fn mask(&self) -> TrainableMask;

    /// Reported |Theta|: trainable parameters excluding the classifier head.
    fn theta(&self, config: &ModelConfig, n_upstream: usize, rank: usize, per_site_v: bool) -> usize {
        param_counts(self.mask(), config, n_upstream, rank, per_site_v).theta()
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<AdaptedModel>;
}

fn fresh_state(ctx: &AdaptContext<'_>) -> TrainableState {
    TrainableState {
        base: ctx.base.clone(),
        head: ClassifierHead::zeros(ctx.base.config.d_model, ctx.classes()),
        adapters: None,
        composed: None,
    }
}

pub struct ClassifierTuning;

impl AdaptStrategy for ClassifierTuning {
    fn name(&self) -> &'static str {
        "classifier_tuning"
    }

    fn mask(&self) -> TrainableMask {
        TrainableMask::HEAD_ONLY
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<AdaptedModel> {
        ctx.require_support()?;
        let (warmup, rest) = ctx.split_epochs();
        let mut state = fresh_state(ctx);
        let stream = ctx.stream();
        // warm-up and method phase are both head-only
        run_head_phase(
            &mut state,
            warmup,
            ctx.hp,
            stream.substream("warmup"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        run_head_phase(
            &mut state,
            rest,
            ctx.hp,
            stream.substream("train"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        let theta = self.theta(&ctx.base.config, ctx.upstream.len(), ctx.rank, ctx.hp.per_site_weights);
        Ok(AdaptedModel::from_state(state, None, theta))
    }
}

pub struct FullFinetune;

impl AdaptStrategy for FullFinetune {
    fn name(&self) -> &'static str {
        "full_finetune"
    }

    fn mask(&self) -> TrainableMask {
        TrainableMask {
            base: true,
            head: true,
            ..TrainableMask::NONE
        }
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<AdaptedModel> {
        ctx.require_support()?;
        let (warmup, rest) = ctx.split_epochs();
        let mut state = fresh_state(ctx);
        let stream = ctx.stream();
        run_head_phase(
            &mut state,
            warmup,
            ctx.hp,
            stream.substream("warmup"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        run_full_phase(
            &mut state,
            self.mask(),
            rest,
            ctx.hp,
            stream.substream("train"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        let theta = self.theta(&ctx.base.config, ctx.upstream.len(), ctx.rank, ctx.hp.per_site_weights);
        Ok(AdaptedModel::from_state(state, None, theta))
    }
}

pub struct LoraScratch;

impl AdaptStrategy for LoraScratch {
    fn name(&self) -> &'static str {
        "lora_scratch"
    }

    fn mask(&self) -> TrainableMask {
        TrainableMask {
            head: true,
            adapters: true,
            ..TrainableMask::NONE
        }
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<AdaptedModel> {
        ctx.require_support()?;
        let (warmup, rest) = ctx.split_epochs();
        let stream = ctx.stream();
        let mut init_stream = stream.substream("init");
        let d = ctx.base.config.d_model;
        let adapters: std::collections::BTreeMap<_, _> = ctx
            .base
            .sites()
            .into_iter()
            .map(|site| {
                init_adapter(d, d, ctx.rank, ctx.alpha, &mut init_stream).map(|ad| (site, ad))
            })
            .collect::<Result<_>>()?;
        let mut state = fresh_state(ctx);
        state.adapters = Some(AdapterSet::new(adapters, "scratch")?);

        // warm-up sees the frozen model exactly: fresh adapters have zero delta
        run_head_phase(
            &mut state,
            warmup,
            ctx.hp,
            stream.substream("warmup"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        run_full_phase(
            &mut state,
            self.mask(),
            rest,
            ctx.hp,
            stream.substream("train"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        let theta = self.theta(&ctx.base.config, ctx.upstream.len(), ctx.rank, ctx.hp.per_site_weights);
        Ok(AdaptedModel::from_state(state, None, theta))
    }
}

pub struct UniformComposition;

impl AdaptStrategy for UniformComposition {
    fn name(&self) -> &'static str {
        "uniform_composition"
    }

    fn mask(&self) -> TrainableMask {
        TrainableMask::HEAD_ONLY
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<AdaptedModel> {
        ctx.require_support()?;
        ctx.require_upstream()?;
        let (warmup, rest) = ctx.split_epochs();
        let mut state = fresh_state(ctx);
        state.composed = Some(compose_model(
            &ctx.base.sites(),
            &ctx.upstream_sets(),
            ComposeMode::Uniform,
        )?);
        let stream = ctx.stream();
        run_head_phase(
            &mut state,
            warmup,
            ctx.hp,
            stream.substream("warmup"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        run_head_phase(
            &mut state,
            rest,
            ctx.hp,
            stream.substream("train"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        let theta = self.theta(&ctx.base.config, ctx.upstream.len(), ctx.rank, ctx.hp.per_site_weights);
        Ok(AdaptedModel::from_state(state, None, theta))
    }
}

pub struct LearnedComposition;

impl AdaptStrategy for LearnedComposition {
    fn name(&self) -> &'static str {
        "learned_composition"
    }

    fn mask(&self) -> TrainableMask {
        TrainableMask {
            head: true,
            composition_v: true,
            ..TrainableMask::NONE
        }
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<AdaptedModel> {
        ctx.require_support()?;
        ctx.require_upstream()?;
        let (warmup, rest) = ctx.split_epochs();
        let sets = ctx.upstream_sets();
        let sites = ctx.base.sites();
        // zero logits: learned composition starts exactly at uniform
        let weights = CompositionWeights::zeros(
            &sites,
            sets.iter().map(|s| s.provenance.clone()).collect(),
        )?;
        let mut state = fresh_state(ctx);
        state.composed = Some(compose_model(&sites, &sets, ComposeMode::Learned(weights))?);

        let stream = ctx.stream();
        run_head_phase(
            &mut state,
            warmup,
            ctx.hp,
            stream.substream("warmup"),
            &ctx.episode.support_x,
            &ctx.episode.support_y,
        )?;
        if ctx.hp.sequential_v_phase {
            run_head_phase(
                &mut state,
                rest,
                ctx.hp,
                stream.substream("head"),
                &ctx.episode.support_x,
                &ctx.episode.support_y,
            )?;
            run_v_only_phase(&mut state, rest, ctx.hp, &ctx.episode.support_x, &ctx.episode.support_y)?;
        } else {
            run_full_phase(
                &mut state,
                self.mask(),
                rest,
                ctx.hp,
                stream.substream("train"),
                &ctx.episode.support_x,
                &ctx.episode.support_y,
            )?;
        }
        let weights = state
            .composed
            .as_ref()
            .and_then(|cm| cm.weights())
            .cloned();
        let theta = self.theta(&ctx.base.config, ctx.upstream.len(), ctx.rank, ctx.hp.per_site_weights);
        Ok(AdaptedModel::from_state(state, weights, theta))
    }
}

pub struct ZeroShotUniform;

impl AdaptStrategy for ZeroShotUniform {
    fn name(&self) -> &'static str {
        "zero_shot_uniform"
    }

    fn mask(&self) -> TrainableMask {
        TrainableMask::NONE
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<AdaptedModel> {
        ctx.require_upstream()?;
        // only defined when every task shares one label space, so upstream
        // heads and the downstream query agree on class indices
        for (i, u) in ctx.suite.upstream.iter().enumerate() {
            if u.labels != ctx.suite.downstream.labels {
                return Err(Error::Config(format!(
                    "zero-shot needs a shared label space; upstream {i} has {:?}, downstream {:?}",
                    u.labels, ctx.suite.downstream.labels
                )));
            }
        }
        let heads: Vec<&ClassifierHead> = ctx.upstream.iter().map(|u| &u.head).collect();
        let head = ClassifierHead::average(&heads)?;
        let composed = compose_model(
            &ctx.base.sites(),
            &ctx.upstream_sets(),
            ComposeMode::Uniform,
        )?;
        let theta = self.theta(&ctx.base.config, ctx.upstream.len(), ctx.rank, ctx.hp.per_site_weights);
        Ok(AdaptedModel {
            base: ctx.base.clone(),
            head,
            adapters: None,
            composed: Some(composed),
            weights: None,
            theta,
        })
    }
}

/// Every registered strategy, in report order.
pub static STRATEGIES: [&dyn AdaptStrategy; 6] = [
    &ClassifierTuning,
    &FullFinetune,
    &LoraScratch,
    &UniformComposition,
    &LearnedComposition,
    &ZeroShotUniform,
];

/// Looks a strategy up by name. Hyphens are accepted for underscores, plus
/// the short aliases `lora`, `uniform`, `learned`, and `zero-shot`.
pub fn lookup(name: &str) -> Result<&'static dyn AdaptStrategy> {
    let norm = name.replace('-', "_");
    let norm = match norm.as_str() {
        "lora" => "lora_scratch",
        "uniform" => "uniform_composition",
        "learned" => "learned_composition",
        "zero_shot" => "zero_shot_uniform",
        other => other,
    };
    STRATEGIES
        .iter()
        .find(|s| s.name() == norm)
        .copied()
        .ok_or_else(|| {
            let known: Vec<&str> = STRATEGIES.iter().map(|s| s.name()).collect();
            Error::Argument(format!("unknown method {name:?}; known: {}", known.join(", ")))
        })
}

pub fn method_names() -> Vec<&'static str> {
    STRATEGIES.iter().map(|s| s.name()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup_and_aliases() {
        assert_eq!(lookup("learned_composition").unwrap().name(), "learned_composition");
        assert_eq!(lookup("zero-shot").unwrap().name(), "zero_shot_uniform");
        assert_eq!(lookup("full-finetune").unwrap().name(), "full_finetune");
        assert_eq!(lookup("lora").unwrap().name(), "lora_scratch");
        assert!(lookup("gradient_boosting").is_err());
        assert_eq!(method_names().len(), 6);
    }

    #[test]
    fn masks_match_method_definitions() {
        assert_eq!(lookup("classifier_tuning").unwrap().mask(), TrainableMask::HEAD_ONLY);
        assert_eq!(lookup("uniform_composition").unwrap().mask(), TrainableMask::HEAD_ONLY);
        assert_eq!(lookup("zero_shot_uniform").unwrap().mask(), TrainableMask::NONE);
        let full = lookup("full_finetune").unwrap().mask();
        assert!(full.base && full.head && !full.adapters && !full.composition_v);
        let lora = lookup("lora_scratch").unwrap().mask();
        assert!(lora.adapters && lora.head && !lora.base);
        let learned = lookup("learned_composition").unwrap().mask();
        assert!(learned.composition_v && learned.head && !learned.base && !learned.adapters);
    }

    #[test]
    fn theta_counts_per_method() {
        let cfg = ModelConfig::default();
        assert_eq!(lookup("classifier_tuning").unwrap().theta(&cfg, 3, 4, true), 0);
        assert_eq!(lookup("uniform_composition").unwrap().theta(&cfg, 3, 4, true), 0);
        assert_eq!(lookup("zero_shot_uniform").unwrap().theta(&cfg, 3, 4, true), 0);
        assert_eq!(lookup("learned_composition").unwrap().theta(&cfg, 3, 4, true), 18);
        assert_eq!(lookup("lora_scratch").unwrap().theta(&cfg, 3, 4, true), 768);
        assert_eq!(lookup("full_finetune").unwrap().theta(&cfg, 3, 4, true), 4496);
    }
}
