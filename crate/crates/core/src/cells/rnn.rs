use serde::{Deserialize, Serialize};

use crate::cells::site::{apply, SiteTape};
use crate::cells::{init_uniform, NormMode};
use crate::error::{Error, Result};
use crate::norm::{AtnBuffer, NormGrads, NormParams};
use crate::numkit::{Matrix, Rng};

/// Plain tanh RNN with a per-step output map:
///
/// ```text
/// h = tanh(N_hh(W_h h_prev) + N_ih(W_x x) + β_h)
/// y = N_out(W_y h) + β_y
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub w_h: Matrix,
    pub w_x: Matrix,
    pub beta_h: Matrix,
    pub w_y: Matrix,
    pub beta_y: Matrix,
    pub norm_hh: NormParams,
    pub norm_ih: NormParams,
    pub norm_out: NormParams,
    pub mode: NormMode,
    pub k: usize,
    pub stop_window_gradient: bool,
}

impl RnnParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input: usize,
        hidden: usize,
        outputs: usize,
        mode: NormMode,
        k: usize,
        epsilon: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 || outputs == 0 || k == 0 {
            return Err(Error::InvalidArgument("rnn sizes and k must be positive".into()));
        }
        Ok(RnnParams {
            w_h: init_uniform(rng, hidden, hidden, hidden),
            w_x: init_uniform(rng, hidden, input, input),
            beta_h: Matrix::zeros(1, hidden),
            w_y: init_uniform(rng, outputs, hidden, hidden),
            beta_y: Matrix::zeros(1, outputs),
            norm_hh: NormParams::new(hidden, epsilon, true),
            norm_ih: NormParams::new(hidden, epsilon, true),
            norm_out: NormParams::new(outputs, epsilon, true),
            mode,
            k,
            stop_window_gradient: false,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w_y.rows()
    }

    fn window(&self) -> usize {
        if self.mode == NormMode::Atn {
            self.k
        } else {
            1
        }
    }

    pub fn param_groups(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("w_h", &self.w_h),
            ("w_x", &self.w_x),
            ("beta_h", &self.beta_h),
            ("w_y", &self.w_y),
            ("beta_y", &self.beta_y),
        ];
        if self.mode != NormMode::Plain {
            for (g, b, p) in [
                ("hh.gamma", "hh.beta", &self.norm_hh),
                ("ih.gamma", "ih.beta", &self.norm_ih),
                ("out_norm.gamma", "out_norm.beta", &self.norm_out),
            ] {
                if p.trainable {
                    out.push((g, &p.gamma));
                    out.push((b, &p.beta));
                }
            }
        }
        out
    }

    pub fn param_groups_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![
            ("w_h", &mut self.w_h),
            ("w_x", &mut self.w_x),
            ("beta_h", &mut self.beta_h),
            ("w_y", &mut self.w_y),
            ("beta_y", &mut self.beta_y),
        ];
        if self.mode != NormMode::Plain {
            for (g, b, p) in [
                ("hh.gamma", "hh.beta", &mut self.norm_hh),
                ("ih.gamma", "ih.beta", &mut self.norm_ih),
                ("out_norm.gamma", "out_norm.beta", &mut self.norm_out),
            ] {
                if p.trainable {
                    out.push((g, &mut p.gamma));
                    out.push((b, &mut p.beta));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RnnState {
    pub h: Matrix,
    pub hh: AtnBuffer,
    pub ih: AtnBuffer,
    pub out: AtnBuffer,
}

impl RnnState {
    pub fn new(params: &RnnParams, batch: usize) -> Result<Self> {
        let k = params.window();
        Ok(RnnState {
            h: Matrix::zeros(batch, params.hidden()),
            hh: AtnBuffer::new(k)?,
            ih: AtnBuffer::new(k)?,
            out: AtnBuffer::new(k)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RnnStepRecord {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub h: Matrix,
}

#[derive(Clone, Debug)]
pub struct RnnTape {
    pub steps: Vec<RnnStepRecord>,
    pub hh: SiteTape,
    pub ih: SiteTape,
    pub out: SiteTape,
}

impl RnnTape {
    pub fn begin(params: &RnnParams, state: &RnnState) -> Self {
        RnnTape {
            steps: Vec::new(),
            hh: SiteTape::begin(params.mode, &state.hh),
            ih: SiteTape::begin(params.mode, &state.ih),
            out: SiteTape::begin(params.mode, &state.out),
        }
    }
}

/// Gradients in the order of [`RnnParams::param_groups`] are produced by
/// [`RnnGrads::groups`].
#[derive(Clone, Debug, PartialEq)]
pub struct RnnGrads {
    pub w_h: Matrix,
    pub w_x: Matrix,
    pub beta_h: Matrix,
    pub w_y: Matrix,
    pub beta_y: Matrix,
    pub hh: NormGrads,
    pub ih: NormGrads,
    pub out: NormGrads,
}

impl RnnGrads {
    fn zeros(p: &RnnParams) -> Self {
        RnnGrads {
            w_h: Matrix::zeros(p.hidden(), p.hidden()),
            w_x: Matrix::zeros(p.hidden(), p.input()),
            beta_h: Matrix::zeros(1, p.hidden()),
            w_y: Matrix::zeros(p.outputs(), p.hidden()),
            beta_y: Matrix::zeros(1, p.outputs()),
            hh: NormGrads::zeros(p.hidden()),
            ih: NormGrads::zeros(p.hidden()),
            out: NormGrads::zeros(p.outputs()),
        }
    }

    pub fn groups(&self, params: &RnnParams) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("w_h", &self.w_h),
            ("w_x", &self.w_x),
            ("beta_h", &self.beta_h),
            ("w_y", &self.w_y),
            ("beta_y", &self.beta_y),
        ];
        if params.mode != NormMode::Plain {
            for (g, b, p, grad) in [
                ("hh.gamma", "hh.beta", &params.norm_hh, &self.hh),
                ("ih.gamma", "ih.beta", &params.norm_ih, &self.ih),
                ("out_norm.gamma", "out_norm.beta", &params.norm_out, &self.out),
            ] {
                if p.trainable {
                    out.push((g, &grad.gamma));
                    out.push((b, &grad.beta));
                }
            }
        }
        out
    }
}

/// One step; returns `(h, y)`.
pub fn rnn_step(
    params: &RnnParams,
    state: &mut RnnState,
    x: &Matrix,
    tape: Option<&mut RnnTape>,
) -> Result<(Matrix, Matrix)> {
    if x.cols() != params.input() || x.rows() != state.h.rows() {
        return Err(Error::ShapeMismatch {
            op: "rnn_step",
            left: (state.h.rows(), params.input()),
            right: x.shape(),
        });
    }
    let a_hh = state.h.matmul_nt(&params.w_h)?;
    let a_ih = x.matmul_nt(&params.w_x)?;
    let mut tape = tape;
    let (y_hh, y_ih) = match tape.as_deref_mut() {
        Some(t) => (
            t.hh.forward(&mut state.hh, &a_hh, &params.norm_hh)?,
            t.ih.forward(&mut state.ih, &a_ih, &params.norm_ih)?,
        ),
        None => (
            apply(params.mode, &mut state.hh, &a_hh, &params.norm_hh)?,
            apply(params.mode, &mut state.ih, &a_ih, &params.norm_ih)?,
        ),
    };
    let mut pre = y_hh.add(&y_ih)?;
    pre.add_row_broadcast(&params.beta_h)?;
    let h = pre.tanh();
    let a_y = h.matmul_nt(&params.w_y)?;
    let mut y = match tape.as_deref_mut() {
        Some(t) => t.out.forward(&mut state.out, &a_y, &params.norm_out)?,
        None => apply(params.mode, &mut state.out, &a_y, &params.norm_out)?,
    };
    y.add_row_broadcast(&params.beta_y)?;
    let h_prev = std::mem::replace(&mut state.h, h.clone());
    if let Some(t) = tape {
        t.steps.push(RnnStepRecord {
            x: x.clone(),
            h_prev,
            h: h.clone(),
        });
    }
    Ok((h, y))
}

/// Runs `xs` from a fresh state, returning every step's output.
pub fn rnn_forward_sequence(params: &RnnParams, xs: &[Matrix]) -> Result<(Vec<Matrix>, RnnTape)> {
    let batch = xs.first().map_or(0, |x| x.rows());
    let mut state = RnnState::new(params, batch)?;
    let mut tape = RnnTape::begin(params, &state);
    let ys = xs
        .iter()
        .map(|x| rnn_step(params, &mut state, x, Some(&mut tape)).map(|(_, y)| y))
        .collect::<Result<Vec<_>>>()?;
    Ok((ys, tape))
}

pub fn rnn_backward_sequence(params: &RnnParams, tape: &RnnTape, dys: &[Matrix]) -> Result<RnnGrads> {
    let steps = tape.steps.len();
    if dys.len() != steps || tape.out.len() != steps || tape.hh.len() != steps {
        return Err(Error::Tape(format!("{} output gradients for {steps} steps", dys.len())));
    }
    let mut grads = RnnGrads::zeros(params);
    if steps == 0 {
        return Ok(grads);
    }
    let batch = tape.steps[0].h.rows();
    let n = params.hidden();
    let stop = params.stop_window_gradient;
    let mut site_out = tape.out.backward();
    let mut site_hh = tape.hh.backward();
    let mut site_ih = tape.ih.backward();
    let mut dh_next = Matrix::zeros(batch, n);
    for t in (0..steps).rev() {
        let rec = &tape.steps[t];
        grads.beta_y.add_assign(&dys[t].sum_rows())?;
        let da_y = site_out.step(t, &dys[t], &params.norm_out, stop, &mut grads.out)?;
        grads.w_y.add_matmul_tn(&da_y, &rec.h)?;
        let mut dh = da_y.matmul(&params.w_y)?;
        dh.add_assign(&dh_next)?;
        let dpre = dh.zip_map(&rec.h, "rnn_backward", |g, h| g * (1.0 - h * h))?;
        grads.beta_h.add_assign(&dpre.sum_rows())?;
        let da_hh = site_hh.step(t, &dpre, &params.norm_hh, stop, &mut grads.hh)?;
        let da_ih = site_ih.step(t, &dpre, &params.norm_ih, stop, &mut grads.ih)?;
        grads.w_h.add_matmul_tn(&da_hh, &rec.h_prev)?;
        dh_next = da_hh.matmul(&params.w_h)?;
        grads.w_x.add_matmul_tn(&da_ih, &rec.x)?;
    }
    Ok(grads)
}
