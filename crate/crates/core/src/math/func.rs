//! Scalar/vector functions shared by the model and composition code.

use crate::error::{Error, Result};

/// Numerically stable softmax: subtracts the maximum before exponentiating.
/// Outputs are positive and sum to 1 (within 1e-12 for realistic inputs).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::Argument("softmax input must be finite".into()));
    }
    Ok(softmax_unchecked(logits))
}

/// Softmax without the input checks, for inner loops that already guarantee
/// finite non-empty logits.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// `ln(sum_i exp(x_i))` with max-subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Cross-entropy loss and its logit gradient for one sample.
///
/// `loss = -log softmax(logits)[label]` and
/// `grad = softmax(logits) - onehot(label)`; grad entries sum to 0.
///
/// The loss is evaluated as `(max - logit_label) + ln_1p(sum_{i != argmax}
/// exp(x_i - max))`: the argmax term of the exp-sum is exactly 1, so
/// `ln_1p` keeps full relative precision when the label is the argmax and
/// the loss is tiny.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let (argmax, max) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &x)| {
            if x > bm {
                (i, x)
            } else {
                (bi, bm)
            }
        });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    let loss = (max - logits[label]) + rest.ln_1p();
    let lse = max + rest.ln_1p();
    let mut grad: Vec<f64> = logits.iter().map(|&x| (x - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Logistic sigmoid, stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid form of GELU: `x * sigmoid(1.702 x)`. The constant 1.702 is the
/// best logistic fit to the standard Gaussian CDF, so this is the exact,
/// tanh-free closed form of the usual GELU approximation; `gelu_grad`
/// differentiates this same expression, keeping finite-difference checks
/// exact.
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(GELU_SIGMOID_SCALE * x)
}

/// d/dx of [`gelu`]: `s + x * c * s * (1 - s)` with `s = sigmoid(c x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(GELU_SIGMOID_SCALE * x);
    s + x * GELU_SIGMOID_SCALE * s * (1.0 - s)
}

/// Logistic scale that minimizes the max error to the Gaussian CDF.
pub const GELU_SIGMOID_SCALE: f64 = 1.702;
