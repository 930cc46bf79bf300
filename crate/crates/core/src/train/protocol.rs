//! The three-phase experiment protocol: pretrain the base model on its own
//! task, train one adapter set per upstream task against the frozen base,
//! then run the method x K x seed adaptation grid on the downstream task.
//!
//! The base and upstream phases run once per suite from `pipeline_seed`;
//! the seed axis of the grid varies only episode sampling and adaptation
//! stochasticity. Methods at a fixed (K, seed) share the identical episode,
//! so comparisons are paired.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lora::{init_adapter, AdapterSet};
use crate::math::RngStream;
use crate::model::{top1_accuracy, BaseModel, ClassifierHead, ModelConfig, Overlay, TrainableMask};
use crate::tasks::{sample_episode, Episode, KShot, SuiteSpec, TaskSpec};
use crate::train::engine::{FullPhase, TrainableState};
use crate::train::hyper::Hyperparams;
use crate::train::methods::{AdaptContext, AdaptStrategy, AdaptedModel};
use crate::train::report::{CellFailure, EvalReport, ReportRow, WeightDump, WeightSummary};

/// Accuracy the pretraining phase stops at.
pub const PRETRAIN_TARGET_ACC: f64 = 0.95;
/// Both training phases must at least reach this, or the task/config is
/// considered broken.
pub const DIAGNOSTIC_FLOOR_ACC: f64 = 0.60;

/// One upstream task's artifacts: its adapter set and its task-local head
/// (retained only for the zero-shot analog).
#[derive(Debug, Clone)]
pub struct TrainedUpstream {
    pub set: AdapterSet,
    pub head: ClassifierHead,
}

/// Full-parameter training on the suite's base task until the train
/// accuracy reaches 95% or the epoch cap. The result is the frozen base
/// every later phase builds on.
pub fn pretrain_base(
    suite: &SuiteSpec,
    config: &ModelConfig,
    hp: &Hyperparams,
    seed: u64,
) -> Result<BaseModel> {
    hp.validate()?;
    let root = RngStream::from_seed(seed);
    let base = BaseModel::init(*config, &mut root.substream("pretrain.init"))?;
    let task = &suite.base_task;
    let (xs, ys) = task.train_pool();

    let mut state = TrainableState {
        base,
        head: ClassifierHead::zeros(config.d_model, task.classes()),
        adapters: None,
        composed: None,
    };
    let mask = TrainableMask {
        base: true,
        head: true,
        ..TrainableMask::NONE
    };
    let mut phase = FullPhase::new(hp, mask, root.substream("pretrain.shuffle"));
    let mut acc = 0.0;
    for _ in 0..hp.pretrain_epochs {
        phase.epoch(&mut state, hp, &xs, &ys)?;
        acc = top1_accuracy(&state.base, &state.head, Overlay::None, &xs, &ys)?;
        if acc >= PRETRAIN_TARGET_ACC {
            break;
        }
    }
    if acc < DIAGNOSTIC_FLOOR_ACC {
        return Err(Error::Diagnostic(format!(
            "pretraining reached only {:.1}% train accuracy on task {} \
             ({} epochs); the task or config is broken",
            acc * 100.0,
            task.id,
            hp.pretrain_epochs
        )));
    }
    Ok(state.base)
}

/// Trains one adapter set (q/k/v sites) plus a task-local head on the full
/// upstream task against the frozen base.
pub fn train_upstream(
    base: &BaseModel,
    task: &TaskSpec,
    hp: &Hyperparams,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<TrainedUpstream> {
    hp.validate()?;
    let root = RngStream::from_seed(seed).substream(&format!("upstream.{}", task.id));
    let mut init_stream = root.substream("init");
    let d = base.config.d_model;
    let adapters: std::collections::BTreeMap<_, _> = base
        .sites()
        .into_iter()
        .map(|site| init_adapter(d, d, rank, alpha, &mut init_stream).map(|ad| (site, ad)))
        .collect::<Result<_>>()?;

    let (xs, ys) = task.train_pool();
    let mut state = TrainableState {
        base: base.clone(),
        head: ClassifierHead::zeros(d, task.classes()),
        adapters: Some(AdapterSet::new(adapters, task.id.clone())?),
        composed: None,
    };
    let mask = TrainableMask {
        head: true,
        adapters: true,
        ..TrainableMask::NONE
    };
    let mut phase = FullPhase::new(hp, mask, root.substream("shuffle"));
    for _ in 0..hp.upstream_epochs {
        phase.epoch(&mut state, hp, &xs, &ys)?;
    }
    let acc = top1_accuracy(&state.base, &state.head, state.overlay(), &xs, &ys)?;
    if acc < DIAGNOSTIC_FLOOR_ACC {
        return Err(Error::Diagnostic(format!(
            "upstream training on task {} reached only {:.1}% train accuracy",
            task.id,
            acc * 100.0
        )));
    }
    Ok(TrainedUpstream {
        set: state.adapters.expect("adapters trained"),
        head: state.head,
    })
}

/// Adapts to one episode with the given method.
pub fn adapt(strategy: &dyn AdaptStrategy, ctx: &AdaptContext<'_>) -> Result<AdaptedModel> {
    ctx.hp.validate()?;
    strategy.adapt(ctx)
}

/// Inputs shared by every cell of a grid run.
pub struct GridInputs<'a> {
    pub suite: &'a SuiteSpec,
    pub config: &'a ModelConfig,
    pub base: &'a BaseModel,
    pub upstream: &'a [TrainedUpstream],
    pub hp: &'a Hyperparams,
    pub rank: usize,
    pub alpha: f64,
}

/// Runs the full (method x K x seed) factorial. Cells run in parallel and
/// are reported in grid order; a failing cell is recorded and the rest of
/// the grid continues.
pub fn run_grid(
    inputs: &GridInputs<'_>,
    methods: &[&'static dyn AdaptStrategy],
    k_grid: &[KShot],
    seeds: &[u64],
    detail: &str,
) -> Result<EvalReport> {
    // paired episodes: every method at a fixed (k, seed) sees the same data
    let mut episodes: Vec<((KShot, u64), Episode)> = Vec::new();
    for &k in k_grid {
        for &seed in seeds {
            episodes.push(((k, seed), sample_episode(&inputs.suite.downstream, k, seed)?));
        }
    }
    let episode = |k: KShot, seed: u64| -> &Episode {
        &episodes
            .iter()
            .find(|((ek, es), _)| *ek == k && *es == seed)
            .expect("episode sampled above")
            .1
    };

    let mut cells: Vec<(&'static dyn AdaptStrategy, KShot, u64)> = Vec::new();
    for &method in methods {
        for &k in k_grid {
            for &seed in seeds {
                cells.push((method, k, seed));
            }
        }
    }

    let outcomes: Vec<(String, KShot, u64, Result<(f64, AdaptedModel)>)> = cells
        .par_iter()
        .map(|&(method, k, seed)| {
            let ep = episode(k, seed);
            let ctx = AdaptContext {
                base: inputs.base,
                upstream: inputs.upstream,
                suite: inputs.suite,
                episode: ep,
                hp: inputs.hp,
                rank: inputs.rank,
                alpha: inputs.alpha,
                seed,
            };
            let outcome = adapt(method, &ctx)
                .and_then(|m| m.accuracy(&ep.query_x, &ep.query_y).map(|acc| (acc, m)));
            (method.name().to_string(), k, seed, outcome)
        })
        .collect();

    let mut report = EvalReport::default();
    for (method, k, seed, outcome) in outcomes {
        match outcome {
            Ok((accuracy, model)) => {
                report.rows.push(ReportRow {
                    suite: inputs.suite.id.clone(),
                    regime: inputs.suite.regime.tag().to_string(),
                    method: method.clone(),
                    detail: detail.to_string(),
                    k,
                    seed,
                    accuracy,
                    theta: model.theta,
                });
                if let Some(weights) = model.weights {
                    report.weight_summaries.push(WeightSummary {
                        suite: inputs.suite.id.clone(),
                        method: method.clone(),
                        detail: detail.to_string(),
                        k,
                        seed,
                        upstream: weights.upstream_order.clone(),
                        mean_weights: weights.mean_weights(),
                    });
                    report.weight_dumps.push(WeightDump {
                        tag: format!("{method}-k{k}-s{seed}"),
                        weights,
                    });
                }
            }
            Err(err) => {
                report.incomplete = true;
                report.failures.push(CellFailure {
                    suite: inputs.suite.id.clone(),
                    method,
                    k,
                    seed,
                    error: err.to_string(),
                });
            }
        }
    }
    Ok(report)
}

/// Pretrains, trains every upstream adapter set, and runs the grid: the
/// whole protocol for one suite.
pub fn run_suite(
    suite: &SuiteSpec,
    config: &ModelConfig,
    methods: &[&'static dyn AdaptStrategy],
    k_grid: &[KShot],
    seeds: &[u64],
    hp: &Hyperparams,
    pipeline_seed: u64,
    rank: usize,
    alpha: f64,
) -> Result<EvalReport> {
    suite.validate()?;
    let base = pretrain_base(suite, config, hp, pipeline_seed)?;
    let upstream = train_all_upstream(&base, suite, hp, rank, alpha, pipeline_seed)?;
    let inputs = GridInputs {
        suite,
        config,
        base: &base,
        upstream: &upstream,
        hp,
        rank,
        alpha,
    };
    run_grid(&inputs, methods, k_grid, seeds, "")
}

pub fn train_all_upstream(
    base: &BaseModel,
    suite: &SuiteSpec,
    hp: &Hyperparams,
    rank: usize,
    alpha: f64,
    pipeline_seed: u64,
) -> Result<Vec<TrainedUpstream>> {
    suite
        .upstream
        .par_iter()
        .map(|task| train_upstream(base, task, hp, rank, alpha, pipeline_seed))
        .collect()
}
