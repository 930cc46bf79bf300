//! Deterministic dense linear algebra, differentiable scalar functions, and
//! seeded randomness. Everything downstream builds on this module.

mod func;
mod matrix;
mod rng;

pub use func::{cross_entropy, gelu, gelu_grad, log_sum_exp, sigmoid, softmax};
pub(crate) use func::softmax_unchecked;
pub use matrix::Matrix;
pub use rng::{gaussian, RngStream};
