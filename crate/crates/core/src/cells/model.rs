use serde::{Deserialize, Serialize};

use crate::cells::init_uniform;
use crate::cells::lstm::{lstm_backward, lstm_step, CellState, LstmGrads, LstmParams, LstmTape};
use crate::error::{Error, Result};
use crate::norm::{ln_backward, ln_forward, LnCache, NormGrads, NormParams};
use crate::numkit::{Matrix, Rng};

/// Which steps the readout is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputSchedule {
    /// One output per input step (copy, denoise).
    EveryStep,
    /// A single output after the last step (adding, pixel MNIST).
    FinalStep,
}

/// Affine map from the hidden state to task outputs, optionally layer
/// normalized before the bias: `z = N(W h) + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub w: Matrix,
    pub b: Matrix,
    pub norm: Option<NormParams>,
}

impl Readout {
    pub fn new(hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        Readout {
            w: init_uniform(rng, outputs, hidden, hidden),
            b: Matrix::zeros(1, outputs),
            norm: None,
        }
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    fn forward(&self, h: &Matrix) -> Result<(Matrix, Option<LnCache>)> {
        let z = h.matmul_nt(&self.w)?;
        let (mut z, cache) = match &self.norm {
            Some(p) => {
                let (y, cache) = ln_forward(&z, p)?;
                (y, Some(cache))
            }
            None => (z, None),
        };
        z.add_row_broadcast(&self.b)?;
        Ok((z, cache))
    }
}

/// A single-layer LSTM with a readout head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub cell: LstmParams,
    pub readout: Readout,
}

#[derive(Clone, Debug)]
pub struct SequenceTape {
    pub cell: LstmTape,
    pub schedule: OutputSchedule,
    readout_caches: Vec<Option<LnCache>>,
}

impl SequenceTape {
    fn output_steps(&self) -> Vec<usize> {
        output_steps(self.schedule, self.cell.len())
    }
}

fn output_steps(schedule: OutputSchedule, steps: usize) -> Vec<usize> {
    match schedule {
        OutputSchedule::EveryStep => (0..steps).collect(),
        OutputSchedule::FinalStep => steps.checked_sub(1).into_iter().collect(),
    }
}

/// Gradients for every parameter of an [`LstmModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub cell: LstmGrads,
    pub readout_w: Matrix,
    pub readout_b: Matrix,
    pub readout_norm: Option<NormGrads>,
}

/// Runs `xs` from a fresh state (empty windows, zero `h` and `c`).
pub fn forward_sequence(
    model: &LstmModel,
    xs: &[Matrix],
    schedule: OutputSchedule,
) -> Result<(Vec<Matrix>, SequenceTape)> {
    let batch = xs.first().map_or(0, |x| x.rows());
    let mut state = CellState::new(&model.cell, batch)?;
    forward_sequence_from(model, &mut state, xs, schedule)
}

/// Runs `xs` continuing from `state`, which is left at the final step.
pub fn forward_sequence_from(
    model: &LstmModel,
    state: &mut CellState,
    xs: &[Matrix],
    schedule: OutputSchedule,
) -> Result<(Vec<Matrix>, SequenceTape)> {
    let mut cell_tape = LstmTape::begin(&model.cell, state);
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        hs.push(lstm_step(&model.cell, state, x, Some(&mut cell_tape))?);
    }
    let mut outputs = Vec::new();
    let mut readout_caches = Vec::new();
    for t in output_steps(schedule, xs.len()) {
        let (z, cache) = model.readout.forward(&hs[t])?;
        outputs.push(z);
        readout_caches.push(cache);
    }
    let tape = SequenceTape {
        cell: cell_tape,
        schedule,
        readout_caches,
    };
    Ok((outputs, tape))
}

/// Forward pass without recording a tape.
pub fn predict(model: &LstmModel, xs: &[Matrix], schedule: OutputSchedule) -> Result<Vec<Matrix>> {
    let batch = xs.first().map_or(0, |x| x.rows());
    let mut state = CellState::new(&model.cell, batch)?;
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        hs.push(lstm_step(&model.cell, &mut state, x, None)?);
    }
    output_steps(schedule, xs.len())
        .into_iter()
        .map(|t| model.readout.forward(&hs[t]).map(|(z, _)| z))
        .collect()
}

/// Exact gradients of a scalar loss given its gradient w.r.t. each output.
pub fn backward_sequence(model: &LstmModel, tape: &SequenceTape, d_outputs: &[Matrix]) -> Result<ModelGrads> {
    let steps = tape.output_steps();
    if d_outputs.len() != steps.len() || tape.readout_caches.len() != steps.len() {
        return Err(Error::Tape(format!(
            "{} output gradients for {} recorded outputs",
            d_outputs.len(),
            steps.len()
        )));
    }
    let batch = tape.cell.steps.first().map_or(0, |s| s.h.rows());
    let n = model.cell.hidden();
    let mut dh_seq = vec![Matrix::zeros(batch, n); tape.cell.len()];
    let mut readout_w = Matrix::zeros(model.readout.w.rows(), n);
    let mut readout_b = Matrix::zeros(1, model.readout.outputs());
    let mut readout_norm = model.readout.norm.as_ref().map(|p| NormGrads::zeros(p.width()));
    for ((&t, dz), cache) in steps.iter().zip(d_outputs).zip(&tape.readout_caches) {
        readout_b.add_assign(&dz.sum_rows())?;
        let dpre = match (&model.readout.norm, cache, readout_norm.as_mut()) {
            (Some(p), Some(cache), Some(g)) => {
                let (da, ng) = ln_backward(cache, dz, p)?;
                g.gamma.add_assign(&ng.gamma)?;
                g.beta.add_assign(&ng.beta)?;
                da
            }
            (None, None, None) => dz.clone(),
            _ => {
                return Err(Error::Tape(
                    "readout normalization changed since the forward pass".into(),
                ))
            }
        };
        let h = &tape.cell.steps[t].h;
        readout_w.add_matmul_tn(&dpre, h)?;
        dh_seq[t].add_matmul(&dpre, &model.readout.w)?;
    }
    let cell = lstm_backward(&model.cell, &tape.cell, &dh_seq)?;
    Ok(ModelGrads {
        cell,
        readout_w,
        readout_b,
        readout_norm,
    })
}

fn norm_active(mode_normalizes: bool, p: &NormParams) -> bool {
    mode_normalizes && p.trainable
}

impl LstmModel {
    /// Trainable parameters, in a fixed order shared with
    /// [`ModelGrads::groups`].
    pub fn param_groups(&self) -> Vec<(&'static str, &Matrix)> {
        let c = &self.cell;
        let on = c.norms_trainable();
        let mut out = vec![("w_h", &c.w_h), ("w_x", &c.w_x), ("b", &c.b)];
        for (name_g, name_b, p) in [
            ("hh.gamma", "hh.beta", &c.norm_hh),
            ("ih.gamma", "ih.beta", &c.norm_ih),
            ("cell.gamma", "cell.beta", &c.norm_cell),
        ] {
            if norm_active(on, p) {
                out.push((name_g, &p.gamma));
                out.push((name_b, &p.beta));
            }
        }
        out.push(("out.w", &self.readout.w));
        out.push(("out.b", &self.readout.b));
        if let Some(p) = &self.readout.norm {
            if p.trainable {
                out.push(("out_norm.gamma", &p.gamma));
                out.push(("out_norm.beta", &p.beta));
            }
        }
        out
    }

    pub fn param_groups_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let c = &mut self.cell;
        let on = c.norms_trainable();
        let mut out = vec![("w_h", &mut c.w_h), ("w_x", &mut c.w_x), ("b", &mut c.b)];
        for (name_g, name_b, p) in [
            ("hh.gamma", "hh.beta", &mut c.norm_hh),
            ("ih.gamma", "ih.beta", &mut c.norm_ih),
            ("cell.gamma", "cell.beta", &mut c.norm_cell),
        ] {
            if norm_active(on, p) {
                out.push((name_g, &mut p.gamma));
                out.push((name_b, &mut p.beta));
            }
        }
        out.push(("out.w", &mut self.readout.w));
        out.push(("out.b", &mut self.readout.b));
        if let Some(p) = &mut self.readout.norm {
            if p.trainable {
                out.push(("out_norm.gamma", &mut p.gamma));
                out.push(("out_norm.beta", &mut p.beta));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_groups().iter().map(|(_, m)| m.len()).sum()
    }
}

impl ModelGrads {
    /// Gradients matching `model.param_groups()` entry for entry.
    pub fn groups(&self, model: &LstmModel) -> Vec<(&'static str, &Matrix)> {
        let c = &model.cell;
        let on = c.norms_trainable();
        let mut out = vec![("w_h", &self.cell.w_h), ("w_x", &self.cell.w_x), ("b", &self.cell.b)];
        for (name_g, name_b, p, g) in [
            ("hh.gamma", "hh.beta", &c.norm_hh, &self.cell.hh),
            ("ih.gamma", "ih.beta", &c.norm_ih, &self.cell.ih),
            ("cell.gamma", "cell.beta", &c.norm_cell, &self.cell.cell),
        ] {
            if norm_active(on, p) {
                out.push((name_g, &g.gamma));
                out.push((name_b, &g.beta));
            }
        }
        out.push(("out.w", &self.readout_w));
        out.push(("out.b", &self.readout_b));
        if let (Some(p), Some(g)) = (&model.readout.norm, &self.readout_norm) {
            if p.trainable {
                out.push(("out_norm.gamma", &g.gamma));
                out.push(("out_norm.beta", &g.beta));
            }
        }
        out
    }

    pub fn groups_mut(&mut self, model: &LstmModel) -> Vec<(&'static str, &mut Matrix)> {
        let c = &model.cell;
        let on = c.norms_trainable();
        let mut out = vec![
            ("w_h", &mut self.cell.w_h),
            ("w_x", &mut self.cell.w_x),
            ("b", &mut self.cell.b),
        ];
        for (name_g, name_b, p, g) in [
            ("hh.gamma", "hh.beta", &c.norm_hh, &mut self.cell.hh),
            ("ih.gamma", "ih.beta", &c.norm_ih, &mut self.cell.ih),
            ("cell.gamma", "cell.beta", &c.norm_cell, &mut self.cell.cell),
        ] {
            if norm_active(on, p) {
                out.push((name_g, &mut g.gamma));
                out.push((name_b, &mut g.beta));
            }
        }
        out.push(("out.w", &mut self.readout_w));
        out.push(("out.b", &mut self.readout_b));
        if let (Some(p), Some(g)) = (&model.readout.norm, &mut self.readout_norm) {
            if p.trainable {
                out.push(("out_norm.gamma", &mut g.gamma));
                out.push(("out_norm.beta", &mut g.beta));
            }
        }
        out
    }
}
