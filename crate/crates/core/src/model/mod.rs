//! The tiny pre-norm transformer classifier with manual gradients, plus the
//! trainable-group plumbing every adaptation method shares.

mod backward;
mod config;
mod forward;
mod params;

pub use backward::{loss_and_grads, mean_loss, GradBundle, HeadGrads, RawBlockGrads, RawGrads};
pub use config::ModelConfig;
pub use forward::{
    argmax_lowest, forward, pooled_features, predict, resolve_weights, top1_accuracy,
    ForwardCache, Overlay, ResolvedWeights,
};
pub use params::{param_counts, BaseModel, ClassifierHead, ParamCounts, TrainableMask};
