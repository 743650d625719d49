//! Synthetic long-memory benchmarks and pixel-by-pixel MNIST.
//!
//! Every generator is a pure function of its arguments and the [`Rng`]
//! state, so a seed pins down the whole data stream.
//!
//! [`Rng`]: crate::numkit::Rng

mod mnist;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::cells::OutputSchedule;
use crate::error::{Error, Result};
use crate::numkit::{argmax_rows, cross_entropy_logits, mse, Matrix};

pub use mnist::{load_mnist, pixel_batch, to_pixel_sequence, MnistSet, PixelStream, MNIST_PIXELS};
pub use synthetic::{
    gen_add, gen_copy, gen_denoise, COPY_CLASSES, COPY_DIGITS, DENOISE_CLASSES, DENOISE_INPUT, DENOISE_MARKER,
    DENOISE_NOISE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Add,
    Denoise,
    MnistPixel,
}

impl TaskKind {
    pub fn schedule(self) -> OutputSchedule {
        match self {
            TaskKind::Copy | TaskKind::Denoise => OutputSchedule::EveryStep,
            TaskKind::Add | TaskKind::MnistPixel => OutputSchedule::FinalStep,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::Copy => COPY_DIGITS,
            TaskKind::Add => 2,
            TaskKind::Denoise => DENOISE_INPUT,
            TaskKind::MnistPixel => 1,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Copy => COPY_CLASSES,
            TaskKind::Add => 1,
            TaskKind::Denoise => DENOISE_CLASSES,
            TaskKind::MnistPixel => 10,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Add => "add",
            TaskKind::Denoise => "denoise",
            TaskKind::MnistPixel => "mnist-pixel",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "add" | "adding" => Ok(TaskKind::Add),
            "denoise" => Ok(TaskKind::Denoise),
            "mnist-pixel" | "mnist" => Ok(TaskKind::MnistPixel),
            other => Err(format!("unknown task `{other}` (copy, add, denoise, mnist-pixel)")),
        }
    }
}

/// Per-step targets. Steps that are not scored still carry a value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Targets {
    /// `classes[t][row]`.
    Classes(Vec<Vec<usize>>),
    /// `values[t]` is `batch × 1`.
    Regression(Vec<Matrix>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task: TaskKind,
    #[serde(rename = "T")]
    pub t: usize,
    /// Loss of the best memoryless predictor, where one is known.
    pub baseline: Option<f64>,
}

/// One batch of sequences, stored step-major: `inputs[t]` is `batch × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
    /// Weight of each step in the loss.
    pub loss_mask: Vec<f64>,
    /// Steps counted when reporting accuracy.
    pub answer_mask: Vec<bool>,
    pub meta: TaskMeta,
}

/// Loss, its gradient with respect to each model output, and accuracy
/// counts over the answer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub d_outputs: Vec<Matrix>,
    pub correct: usize,
    pub scored: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.correct as f64 / self.scored as f64)
    }
}

impl TaskBatch {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    /// Steps at which the model emits an output for this task.
    pub fn output_steps(&self) -> Vec<usize> {
        match self.meta.task.schedule() {
            OutputSchedule::EveryStep => (0..self.steps()).collect(),
            OutputSchedule::FinalStep => self.steps().checked_sub(1).into_iter().collect(),
        }
    }

    /// Mask-weighted mean of the per-step losses. `outputs` holds one matrix
    /// per entry of [`TaskBatch::output_steps`].
    pub fn evaluate(&self, outputs: &[Matrix]) -> Result<Evaluation> {
        let steps = self.output_steps();
        if outputs.len() != steps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} outputs for {} output steps",
                outputs.len(),
                steps.len()
            )));
        }
        let total: f64 = steps.iter().map(|&t| self.loss_mask[t]).sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("loss mask selects no output step".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0;
        let mut scored = 0;
        let mut d_outputs = Vec::with_capacity(outputs.len());
        for (&t, out) in steps.iter().zip(outputs) {
            let w = self.loss_mask[t] / total;
            let (l, mut g) = match &self.targets {
                Targets::Classes(classes) => {
                    if self.answer_mask[t] {
                        let pred = argmax_rows(out);
                        correct += pred.iter().zip(&classes[t]).filter(|(p, c)| p == c).count();
                        scored += out.rows();
                    }
                    cross_entropy_logits(out, &classes[t])?
                }
                Targets::Regression(values) => mse(out, &values[t])?,
            };
            if w == 0.0 {
                g.fill(0.0);
            } else {
                loss += w * l;
                g.scale_in_place(w);
            }
            d_outputs.push(g);
        }
        Ok(Evaluation {
            loss,
            d_outputs,
            correct,
            scored,
        })
    }
}

pub(crate) fn one_hot_steps(symbols: &[Vec<usize>], width: usize) -> Vec<Matrix> {
    symbols
        .iter()
        .map(|row| {
            let mut m = Matrix::zeros(row.len(), width);
            for (r, &s) in row.iter().enumerate() {
                m.set(r, s, 1.0);
            }
            m
        })
        .collect()
}
