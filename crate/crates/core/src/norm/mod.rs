//! Layer normalization and assorted-time normalization.
//!
//! Both operators normalize one `batch × n` preactivation per time step,
//! sample by sample. Layer normalization takes its mean and variance from
//! the `n` entries of the current step only. Assorted-time normalization
//! pools the statistics over the current step and up to `k − 1` preceding
//! steps of the same sequence (`n · k_t` entries, `k_t = min(t, k)`), and
//! still normalizes only the current step:
//!
//! ```text
//! μ  = 1/(n k_t) Σ_j Σ_s a_s^(t−j)
//! σ² = 1/(n k_t) Σ_j Σ_s (a_s^(t−j) − μ)²
//! y  = γ ⊙ (a^(t) − μ) / √(σ² + ε) + β
//! ```
//!
//! With `k = 1` the two operators coincide.

mod assorted;
mod layer;

pub use assorted::{atn_backward, atn_backward_step, atn_forward_step, AtnAccumulator, AtnBuffer, AtnStep, AtnTape};
pub use layer::{ln_backward, ln_forward, LnCache};

use serde::{Deserialize, Serialize};

use crate::numkit::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Gain, bias and stabilizer of one normalization site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    /// `1 × n` gain, initialized to ones.
    pub gamma: Matrix,
    /// `1 × n` bias, initialized to zeros.
    pub beta: Matrix,
    pub epsilon: f64,
    /// When false, `gamma`/`beta` stay at their initial values and are not
    /// exposed to the optimizer.
    pub trainable: bool,
}

impl NormParams {
    pub fn new(width: usize, epsilon: f64, trainable: bool) -> Self {
        NormParams {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            epsilon,
            trainable,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

/// Gradients of a scalar loss w.r.t. `gamma` and `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormGrads {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl NormGrads {
    pub fn zeros(width: usize) -> Self {
        NormGrads {
            gamma: Matrix::zeros(1, width),
            beta: Matrix::zeros(1, width),
        }
    }
}

/// `1/√(σ² + ε)`, or `0` when both vanish: a constant row with `ε = 0`
/// normalizes to `β` instead of `0/0`.
pub(crate) fn inv_std(var: f64, epsilon: f64) -> f64 {
    let v = var + epsilon;
    if v > 0.0 {
        1.0 / v.sqrt()
    } else {
        0.0
    }
}

/// Per-row mean and population variance of one or more equally shaped
/// blocks, as used by both operators.
pub(crate) fn pooled_row_stats(blocks: &[&Matrix], row: usize) -> (f64, f64) {
    let count: usize = blocks.iter().map(|b| b.cols()).sum();
    let inv = 1.0 / count as f64;
    let mean = blocks.iter().map(|b| b.row(row).iter().sum::<f64>()).sum::<f64>() * inv;
    let var = blocks
        .iter()
        .map(|b| b.row(row).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
        .sum::<f64>()
        * inv;
    (mean, var)
}

/// Per-sample mean and population variance across the columns of `m`,
/// averaged over rows. Used to report post-normalization statistics.
pub fn batch_averaged_stats(m: &Matrix) -> (f64, f64) {
    let rows = m.rows().max(1) as f64;
    let (mut mean, mut var) = (0.0, 0.0);
    for r in 0..m.rows() {
        let (mu, s2) = pooled_row_stats(&[m], r);
        mean += mu;
        var += s2;
    }
    (mean / rows, var / rows)
}
