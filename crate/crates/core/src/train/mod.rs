//! Training: optimizer, the adaptation-method registry, and the three-phase
//! experiment protocol with multi-seed reporting.

mod adam;
mod engine;
mod hyper;
mod methods;
mod protocol;
mod report;

pub use hyper::Hyperparams;
pub use methods::{
    lookup, method_names, AdaptContext, AdaptStrategy, AdaptedModel, ClassifierTuning,
    FullFinetune, LearnedComposition, LoraScratch, UniformComposition, ZeroShotUniform,
    STRATEGIES,
};
pub use protocol::{
    adapt, pretrain_base, run_grid, run_suite, train_all_upstream, train_upstream, GridInputs,
    TrainedUpstream, DIAGNOSTIC_FLOOR_ACC, PRETRAIN_TARGET_ACC,
};
pub use report::{AggregateRow, CellFailure, EvalReport, ReportRow, WeightDump, WeightSummary};
