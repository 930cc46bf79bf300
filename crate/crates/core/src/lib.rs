//! Low-rank adapter training and composition on synthetic few-shot
//! transfer benchmarks.
//!
//! The crate trains LoRA adapters for a tiny transformer classifier on a
//! family of synthetic tasks, merges adapters from several upstream tasks
//! (uniform or learned softmax-weighted averaging), runs the few-shot
//! transfer protocol across label-shift / covariate-shift / task-shift
//! suites, and analyzes which upstream adapters a learned composition picks
//! via linear CKA feature similarity.
//!
//! Entry points:
//! - [`tasks`]: synthetic suite generators and episode sampling
//! - [`train`]: the three-phase protocol and the adaptation-method registry
//! - [`compose`]: uniform / learned adapter merging
//! - [`analysis`]: CKA maps and learned-weight heatmaps
//! - [`pipeline`]: end-to-end drivers behind the CLI subcommands

pub mod analysis;
pub mod compose;
pub mod error;
pub mod io;
pub mod lora;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
