use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};
use crate::tasks::{one_hot_steps, Targets, TaskBatch, TaskKind, TaskMeta};

/// Copy inputs are one-hot over `{0, …, 9}`: blank, digits 1–8, marker 9.
pub const COPY_DIGITS: usize = 10;
/// Copy outputs: blank plus the eight digits.
pub const COPY_CLASSES: usize = 9;
const COPY_MARKER: usize = 9;
const COPY_LEN: usize = 10;

/// Denoise data symbols are `0..DENOISE_CLASSES`.
pub const DENOISE_CLASSES: usize = 10;
pub const DENOISE_NOISE: usize = DENOISE_CLASSES;
pub const DENOISE_MARKER: usize = DENOISE_CLASSES + 1;
pub const DENOISE_INPUT: usize = DENOISE_CLASSES + 2;
const DENOISE_POINTS: usize = 10;

/// Copying memory task.
///
/// Ten digits from 1–8, then `T - 1` blanks, the marker 9, and ten more
/// blanks during which the digits must be reproduced: `T + 20` steps. Every
/// step is scored (blank is the target before the answer window), so a
/// model without memory scores `10·ln 8 / (T + 20)`.
pub fn gen_copy(t: usize, batch: usize, rng: &mut Rng) -> Result<TaskBatch> {
    if t < 1 {
        return Err(Error::InvalidArgument("copy task needs T >= 1".into()));
    }
    let len = t + 20;
    let marker_at = t + 9;
    let mut inputs = vec![vec![0usize; batch]; len];
    let mut targets = vec![vec![0usize; batch]; len];
    for r in 0..batch {
        for j in 0..COPY_LEN {
            let digit = 1 + rng.below(8);
            inputs[j][r] = digit;
            targets[marker_at + 1 + j][r] = digit;
        }
        inputs[marker_at][r] = COPY_MARKER;
    }
    let answer_mask = (0..len).map(|s| s > marker_at).collect();
    Ok(TaskBatch {
        inputs: one_hot_steps(&inputs, COPY_DIGITS),
        targets: Targets::Classes(targets),
        loss_mask: vec![1.0; len],
        answer_mask,
        meta: TaskMeta {
            task: TaskKind::Copy,
            t,
            baseline: Some(COPY_LEN as f64 * 8f64.ln() / len as f64),
        },
    })
}

/// Adding problem.
///
/// Channel 0 marks one step in `[0, T/2)` and one in `[T/2, T)`; channel 1
/// holds i.i.d. `U[0, 1)` values. The target, scored at the last step, is
/// the sum of the two marked values.
pub fn gen_add(t: usize, batch: usize, rng: &mut Rng) -> Result<TaskBatch> {
    if t < 2 {
        return Err(Error::InvalidArgument("adding task needs T >= 2".into()));
    }
    let half = t / 2;
    let mut inputs = vec![Matrix::zeros(batch, 2); t];
    let mut sums = Matrix::zeros(batch, 1);
    for r in 0..batch {
        let first = rng.below(half);
        let second = half + rng.below(t - half);
        let mut sum = 0.0;
        for (s, step) in inputs.iter_mut().enumerate() {
            let v = rng.next_f64();
            step.set(r, 1, v);
            if s == first || s == second {
                step.set(r, 0, 1.0);
                sum += v;
            }
        }
        sums.set(r, 0, sum);
    }
    let mut values = vec![Matrix::zeros(batch, 1); t];
    values[t - 1] = sums;
    let mut loss_mask = vec![0.0; t];
    loss_mask[t - 1] = 1.0;
    Ok(TaskBatch {
        inputs,
        targets: Targets::Regression(values),
        loss_mask,
        answer_mask: vec![false; t],
        meta: TaskMeta {
            task: TaskKind::Add,
            t,
            baseline: Some(1.0 / 6.0),
        },
    })
}

/// Denoise task.
///
/// Ten data symbols sit at random positions (kept in order) among the first
/// `T - 1` steps, every other early step is the noise symbol, the marker
/// occupies step `T - 1`, and the ten data symbols must be emitted over the
/// following ten steps. Only those ten steps are scored.
pub fn gen_denoise(t: usize, batch: usize, rng: &mut Rng) -> Result<TaskBatch> {
    if t < DENOISE_POINTS + 1 {
        return Err(Error::InvalidArgument(format!(
            "denoise task needs T >= {} to fit {DENOISE_POINTS} data points before the marker",
            DENOISE_POINTS + 1
        )));
    }
    let len = t + DENOISE_POINTS;
    let marker_at = t - 1;
    let mut inputs = vec![vec![DENOISE_NOISE; batch]; len];
    let mut targets = vec![vec![0usize; batch]; len];
    for r in 0..batch {
        let positions = rng.distinct_sorted(t - 1, DENOISE_POINTS);
        for (j, &p) in positions.iter().enumerate() {
            let symbol = rng.below(DENOISE_CLASSES);
            inputs[p][r] = symbol;
            targets[t + j][r] = symbol;
        }
        inputs[marker_at][r] = DENOISE_MARKER;
    }
    let answer_mask: Vec<bool> = (0..len).map(|s| s >= t).collect();
    Ok(TaskBatch {
        inputs: one_hot_steps(&inputs, DENOISE_INPUT),
        targets: Targets::Classes(targets),
        loss_mask: answer_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        answer_mask,
        meta: TaskMeta {
            task: TaskKind::Denoise,
            t,
            baseline: Some((DENOISE_CLASSES as f64).ln()),
        },
    })
}
