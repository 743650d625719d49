use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::norm::{inv_std, pooled_row_stats, NormGrads, NormParams};
use crate::numkit::Matrix;

/// One buffered preactivation with its per-row mean and variance, so
/// pooled statistics never revisit the entries.
#[derive(Clone, Debug)]
struct Entry {
    a: Matrix,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Entry {
    fn new(a: Matrix) -> Self {
        let (mean, var) = (0..a.rows()).map(|r| pooled_row_stats(&[&a], r)).unzip();
        Entry { a, mean, var }
    }
}

/// Sliding window over the last `k` raw preactivations of one sequence.
#[derive(Clone, Debug)]
pub struct AtnBuffer {
    capacity: usize,
    entries: VecDeque<Entry>,
}

impl AtnBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("window length k must be at least 1".into()));
        }
        Ok(AtnBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of buffered steps, `min(pushed since reset, k)`.
    pub fn fill(&self) -> usize {
        self.entries.len()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &Matrix> {
        self.entries.iter().map(|e| &e.a)
    }

    /// Forgets every buffered step; the next step is normalized like layer
    /// normalization.
    pub fn reset(&mut self) {
        self.entries.clear();
    }

    fn push(&mut self, a: Matrix) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Entry::new(a));
    }

    /// Pooled mean and population variance of row `r` over the window.
    /// All entries have the same width, so the pooled variance is the mean
    /// within-entry variance plus the variance of the entry means.
    fn pooled(&self, r: usize) -> (f64, f64) {
        let k = self.entries.len() as f64;
        let mean = self.entries.iter().map(|e| e.mean[r]).sum::<f64>() / k;
        let var = self
            .entries
            .iter()
            .map(|e| e.var[r] + (e.mean[r] - mean) * (e.mean[r] - mean))
            .sum::<f64>()
            / k;
        (mean, var)
    }
}

/// Statistics recorded for one normalized step.
#[derive(Clone, Debug, PartialEq)]
pub struct AtnStep {
    /// Position of the oldest window entry in the tape log.
    pub window_start: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Record of every step normalized through one buffer, enough to replay the
/// exact backward pass.
///
/// The tape keeps each preactivation once, in a log; each step refers to its
/// window as a contiguous slice of that log. A tape started with
/// [`AtnTape::resume`] on a non-empty buffer carries the buffered entries as a
/// prefix: they enter the statistics but receive no gradient.
#[derive(Clone, Debug, Default)]
pub struct AtnTape {
    log: Vec<Matrix>,
    log_means: Vec<Vec<f64>>,
    prefix: usize,
    steps: Vec<AtnStep>,
    epsilon: f64,
}

impl AtnTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resume(buffer: &AtnBuffer) -> Self {
        AtnTape {
            log: buffer.entries.iter().map(|e| e.a.clone()).collect(),
            log_means: buffer.entries.iter().map(|e| e.mean.clone()).collect(),
            prefix: buffer.fill(),
            steps: Vec::new(),
            epsilon: 0.0,
        }
    }

    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, t: usize) -> &AtnStep {
        &self.steps[t]
    }

    /// Effective window length `k_t` of step `t`.
    pub fn window_len(&self, t: usize) -> usize {
        self.prefix + t + 1 - self.steps[t].window_start
    }

    /// Window entries of step `t`, oldest first; the last one is the step's own input.
    pub fn window(&self, t: usize) -> &[Matrix] {
        &self.log[self.steps[t].window_start..=self.prefix + t]
    }

    pub fn input(&self, t: usize) -> &Matrix {
        &self.log[self.prefix + t]
    }

    fn record(&mut self, entry: &Entry, fill: usize, mean: Vec<f64>, var: Vec<f64>, epsilon: f64) -> Result<()> {
        self.log.push(entry.a.clone());
        self.log_means.push(entry.mean.clone());
        if self.log.len() < fill {
            return Err(Error::Tape(format!(
                "buffer holds {fill} entries but the tape only knows {}",
                self.log.len()
            )));
        }
        self.epsilon = epsilon;
        self.steps.push(AtnStep {
            window_start: self.log.len() - fill,
            mean,
            var,
        });
        Ok(())
    }
}

/// Pushes `a` into the window and normalizes it with the pooled window
/// statistics. Only the current step is normalized.
pub fn atn_forward_step(
    buffer: &mut AtnBuffer,
    a: &Matrix,
    params: &NormParams,
    tape: Option<&mut AtnTape>,
) -> Result<Matrix> {
    if a.cols() != params.width() {
        return Err(Error::ShapeMismatch {
            op: "atn_forward_step",
            left: a.shape(),
            right: params.gamma.shape(),
        });
    }
    if let Some(prev) = buffer.entries.back() {
        if prev.a.shape() != a.shape() {
            return Err(Error::ShapeMismatch {
                op: "atn_forward_step",
                left: prev.a.shape(),
                right: a.shape(),
            });
        }
    }
    buffer.push(a.clone());
    let mut y = Matrix::zeros(a.rows(), a.cols());
    let mut means = Vec::with_capacity(a.rows());
    let mut vars = Vec::with_capacity(a.rows());
    let (gamma, beta) = (params.gamma.data(), params.beta.data());
    for r in 0..a.rows() {
        let (mean, var) = buffer.pooled(r);
        let inv = inv_std(var, params.epsilon);
        for ((out, &x), (&g, &b)) in y.row_mut(r).iter_mut().zip(a.row(r)).zip(gamma.iter().zip(beta)) {
            *out = g * (x - mean) * inv + b;
        }
        means.push(mean);
        vars.push(var);
    }
    if let Some(tape) = tape {
        let fill = buffer.fill();
        let entry = buffer.entries.back().expect("just pushed");
        tape.record(entry, fill, means, vars, params.epsilon)?;
    }
    Ok(y)
}

/// Backward pass of a single recorded step `t`, written out entry by entry.
///
/// This is the direct form of the operator's Jacobian and costs `O(n k)` per
/// row; [`AtnAccumulator`] computes the same sums faster. `dy` is the upstream gradient of step `t`'s output. Its contribution to
/// every window entry is added into `da[t − j]`; `da` holds one
/// `batch × n` accumulator per recorded step. With `stop_window_gradient`
/// only the current entry (`j = 0`) receives gradient.
///
/// For window entry `a_s^(t−j)` the local Jacobian is
///
/// ```text
/// ∂y_i/∂a_s^(t−j) = γ_i [ (δ_j0 δ_is − 1/N) / √(σ²+ε)
///                         − (a_i^(t) − μ)(a_s^(t−j) − μ) / (N (σ²+ε)^{3/2}) ],   N = n k_t
/// ```
pub fn atn_backward_step(
    tape: &AtnTape,
    t: usize,
    dy: &Matrix,
    params: &NormParams,
    stop_window_gradient: bool,
    da: &mut [Matrix],
    grads: &mut NormGrads,
) -> Result<()> {
    if t >= tape.len() || da.len() != tape.len() {
        return Err(Error::Tape(format!(
            "step {t} with {} accumulators for a tape of {} steps",
            da.len(),
            tape.len()
        )));
    }
    let current = tape.input(t);
    if dy.shape() != current.shape() {
        return Err(Error::ShapeMismatch {
            op: "atn_backward_step",
            left: current.shape(),
            right: dy.shape(),
        });
    }
    let step = &tape.steps[t];
    let window = tape.window(t);
    let n = current.cols();
    let count = (n * window.len()) as f64;
    let gamma = params.gamma.data();
    let mut g = vec![0.0; n];
    for r in 0..current.rows() {
        let mean = step.mean[r];
        let inv = inv_std(step.var[r], tape.epsilon);
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        let dy_row = dy.row(r);
        let a_row = current.row(r);
        for i in 0..n {
            let xhat = (a_row[i] - mean) * inv;
            g[i] = dy_row[i] * gamma[i];
            sum_g += g[i];
            sum_gx += g[i] * xhat;
            grads.gamma.data_mut()[i] += dy_row[i] * xhat;
            grads.beta.data_mut()[i] += dy_row[i];
        }
        let shift = inv * sum_g / count;
        let tilt = inv * sum_gx / count;

        let first_log = step.window_start;
        for (offset, entry) in window.iter().enumerate() {
            let log_idx = first_log + offset;
            let is_current = log_idx == tape.prefix + t;
            if stop_window_gradient && !is_current {
                continue;
            }
            let Some(target) = log_idx.checked_sub(tape.prefix) else {
                continue;
            };
            let e_row = entry.row(r);
            let out = da[target].row_mut(r);
            for s in 0..n {
                let xhat = (e_row[s] - mean) * inv;
                out[s] -= shift + xhat * tilt;
            }
            if is_current {
                for s in 0..n {
                    out[s] += g[s] * inv;
                }
            }
        }
    }
    Ok(())
}

/// Reverse-time backward pass that defers the window terms.
///
/// Every window entry of step `t` receives `−(shift + slope·(a_s − μ))`,
/// which is affine in the entry. The accumulator therefore keeps two
/// scalars per entry and row and only touches the full `batch × n` block
/// when the entry's gradient is taken, making each step cost `O(n + k)` per
/// row. Steps must be fed in reverse order; [`AtnAccumulator::take`] for step
/// `t` is final once steps `t..` have been fed.
#[derive(Clone, Debug)]
pub struct AtnAccumulator {
    direct: Vec<Option<Matrix>>,
    offset: Vec<Vec<f64>>,
    slope: Vec<Vec<f64>>,
    next: usize,
}

impl AtnAccumulator {
    pub fn new(tape: &AtnTape) -> Self {
        let rows = tape.log.first().map_or(0, Matrix::rows);
        AtnAccumulator {
            direct: vec![None; tape.len()],
            offset: vec![vec![0.0; rows]; tape.len()],
            slope: vec![vec![0.0; rows]; tape.len()],
            next: tape.len(),
        }
    }

    /// Feeds the upstream gradient of step `t`.
    pub fn feed(
        &mut self,
        tape: &AtnTape,
        t: usize,
        dy: &Matrix,
        params: &NormParams,
        stop_window_gradient: bool,
        grads: &mut NormGrads,
    ) -> Result<()> {
        if t >= tape.len() || self.direct.len() != tape.len() || t + 1 != self.next {
            return Err(Error::Tape(format!(
                "step {t} fed out of order (expected {}) for a tape of {} steps",
                self.next.wrapping_sub(1),
                tape.len()
            )));
        }
        let current = tape.input(t);
        if dy.shape() != current.shape() {
            return Err(Error::ShapeMismatch {
                op: "AtnAccumulator::feed",
                left: current.shape(),
                right: dy.shape(),
            });
        }
        self.next = t;
        let step = &tape.steps[t];
        let n = current.cols();
        let count = (n * tape.window_len(t)) as f64;
        let gamma = params.gamma.data();
        let first = if stop_window_gradient {
            tape.prefix + t
        } else {
            step.window_start.max(tape.prefix)
        };
        let mut direct = Matrix::zeros(current.rows(), n);
        let (dgamma, dbeta) = (grads.gamma.data_mut(), grads.beta.data_mut());
        for r in 0..current.rows() {
            let mean = step.mean[r];
            let inv = inv_std(step.var[r], tape.epsilon);
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            let out = direct.row_mut(r);
            for (i, (&d, &x)) in dy.row(r).iter().zip(current.row(r)).enumerate() {
                let xhat = (x - mean) * inv;
                let g = d * gamma[i];
                sum_g += g;
                sum_gx += g * xhat;
                dgamma[i] += d * xhat;
                dbeta[i] += d;
                out[i] = g * inv;
            }
            let shift = inv * sum_g / count;
            let slope = inv * inv * sum_gx / count;
            for log_idx in first..=tape.prefix + t {
                let s = log_idx - tape.prefix;
                self.offset[s][r] += shift + (tape.log_means[log_idx][r] - mean) * slope;
                self.slope[s][r] += slope;
            }
        }
        self.direct[t] = Some(direct);
        Ok(())
    }

    /// Gradient w.r.t. the input of step `t`.
    pub fn take(&mut self, tape: &AtnTape, t: usize) -> Result<Matrix> {
        if t < self.next || t >= tape.len() {
            return Err(Error::Tape(format!("step {t} taken before it was fed")));
        }
        let mut da = self.direct[t]
            .take()
            .ok_or_else(|| Error::Tape(format!("step {t} taken twice")))?;
        let entry = tape.input(t);
        let means = &tape.log_means[tape.prefix + t];
        for r in 0..da.rows() {
            let (c, b, mu) = (self.offset[t][r], self.slope[t][r], means[r]);
            for (out, &x) in da.row_mut(r).iter_mut().zip(entry.row(r)) {
                *out -= c + b * (x - mu);
            }
        }
        Ok(da)
    }
}

/// Backward pass over a whole recorded sequence.
///
/// Returns one gradient per recorded step plus the gain/bias gradients. The
/// recurrent dependence between steps is not part of this operator; callers
/// that unroll a network chain the returned gradients through it.
pub fn atn_backward(
    tape: &AtnTape,
    dy_seq: &[Matrix],
    params: &NormParams,
    stop_window_gradient: bool,
) -> Result<(Vec<Matrix>, NormGrads)> {
    if dy_seq.len() != tape.len() {
        return Err(Error::Tape(format!(
            "{} upstream gradients for a tape of {} steps",
            dy_seq.len(),
            tape.len()
        )));
    }
    let mut acc = AtnAccumulator::new(tape);
    let mut grads = NormGrads::zeros(params.width());
    let mut da = vec![Matrix::zeros(0, 0); tape.len()];
    for t in (0..tape.len()).rev() {
        acc.feed(tape, t, &dy_seq[t], params, stop_window_gradient, &mut grads)?;
        da[t] = acc.take(tape, t)?;
    }
    Ok((da, grads))
}
