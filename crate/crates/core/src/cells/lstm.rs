use serde::{Deserialize, Serialize};

use crate::cells::site::{apply, SiteTape};
use crate::cells::{init_uniform, NormMode};
use crate::error::{Error, Result};
use crate::norm::{AtnBuffer, NormGrads, NormParams};
use crate::numkit::{sigmoid, Matrix, Rng};

/// Shape and normalization choices for an [`LstmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct LstmConfig {
    pub input: usize,
    pub hidden: usize,
    pub mode: NormMode,
    /// Window length; only used in [`NormMode::Atn`].
    pub k: usize,
    pub epsilon: f64,
    pub norm_trainable: bool,
    pub bias_inside_norm: bool,
}

/// LSTM weights. The `4n` gate axis is stacked in the order (f, i, o, g):
/// forget, input, output, candidate.
///
/// ```text
/// (f, i, o, g) = N_hh(W_h h) + N_ih(W_x x) + b
/// c = σ(f) ⊙ c_prev + σ(i) ⊙ tanh(g)
/// h = σ(o) ⊙ tanh(N_cell(c))
/// ```
///
/// `N` is the identity, layer normalization or assorted-time normalization
/// depending on `mode`. With `bias_inside_norm`, `b` is added to `W_x x`
/// before `N_ih` instead of after the sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_h: Matrix,
    pub w_x: Matrix,
    pub b: Matrix,
    pub norm_hh: NormParams,
    pub norm_ih: NormParams,
    pub norm_cell: NormParams,
    pub mode: NormMode,
    pub k: usize,
    pub bias_inside_norm: bool,
    /// Truncates assorted-time backward passes to the current step.
    pub stop_window_gradient: bool,
}

impl LstmParams {
    /// Fan-in scaled uniform weights, forget-gate bias 1, other biases 0.
    pub fn new(cfg: &LstmConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.hidden == 0 || cfg.input == 0 {
            return Err(Error::InvalidArgument("hidden and input sizes must be positive".into()));
        }
        if cfg.k == 0 {
            return Err(Error::InvalidArgument("window length k must be at least 1".into()));
        }
        let n = cfg.hidden;
        let w_h = init_uniform(rng, 4 * n, n, n);
        let w_x = init_uniform(rng, 4 * n, cfg.input, cfg.input);
        let mut b = Matrix::zeros(1, 4 * n);
        for v in &mut b.data_mut()[..n] {
            *v = 1.0;
        }
        Ok(LstmParams {
            w_h,
            w_x,
            b,
            norm_hh: NormParams::new(4 * n, cfg.epsilon, cfg.norm_trainable),
            norm_ih: NormParams::new(4 * n, cfg.epsilon, cfg.norm_trainable),
            norm_cell: NormParams::new(n, cfg.epsilon, cfg.norm_trainable),
            mode: cfg.mode,
            k: cfg.k,
            bias_inside_norm: cfg.bias_inside_norm,
            stop_window_gradient: false,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    /// Buffer length the sites need: `k` in ATN mode, otherwise 1.
    pub fn window(&self) -> usize {
        match self.mode {
            NormMode::Atn => self.k,
            _ => 1,
        }
    }

    /// Whether the normalization gains/biases are optimized.
    pub fn norms_trainable(&self) -> bool {
        self.mode != NormMode::Plain
    }
}

/// Which weight matrix [`scale_weight_matrix`] rescales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMatrix {
    Recurrent,
    Input,
}

/// Copy of `params` with `W_h` multiplied by `delta`.
pub fn scale_weights(params: &LstmParams, delta: f64) -> Result<LstmParams> {
    scale_weight_matrix(params, WeightMatrix::Recurrent, delta)
}

pub fn scale_weight_matrix(params: &LstmParams, which: WeightMatrix, delta: f64) -> Result<LstmParams> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("scale factor {delta} must be positive")));
    }
    let mut out = params.clone();
    match which {
        WeightMatrix::Recurrent => out.w_h.scale_in_place(delta),
        WeightMatrix::Input => out.w_x.scale_in_place(delta),
    }
    Ok(out)
}

/// Recurrent state of one batch of sequences.
#[derive(Clone, Debug)]
pub struct CellState {
    pub h: Matrix,
    pub c: Matrix,
    pub hh: AtnBuffer,
    pub ih: AtnBuffer,
    pub cell: AtnBuffer,
}

impl CellState {
    pub fn new(params: &LstmParams, batch: usize) -> Result<Self> {
        let n = params.hidden();
        let k = params.window();
        Ok(CellState {
            h: Matrix::zeros(batch, n),
            c: Matrix::zeros(batch, n),
            hh: AtnBuffer::new(k)?,
            ih: AtnBuffer::new(k)?,
            cell: AtnBuffer::new(k)?,
        })
    }

    /// Zeroes `h`/`c` and empties the windows for a new sequence.
    pub fn reset(&mut self) {
        self.h.fill(0.0);
        self.c.fill(0.0);
        self.hh.reset();
        self.ih.reset();
        self.cell.reset();
    }
}

/// Everything one forward step keeps for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmStepRecord {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    /// σ(f), σ(i), σ(o), tanh(g), stacked as `batch × 4n`.
    pub gates: Matrix,
    pub c: Matrix,
    /// Normalized outputs of the three sites.
    pub y_hh: Matrix,
    pub y_ih: Matrix,
    pub y_cell: Matrix,
    pub tanh_cell: Matrix,
    pub h: Matrix,
}

#[derive(Clone, Debug)]
pub struct LstmTape {
    pub steps: Vec<LstmStepRecord>,
    pub hh: SiteTape,
    pub ih: SiteTape,
    pub cell: SiteTape,
}

impl LstmTape {
    /// Starts a tape at the current state; windows already buffered in
    /// `state` become read-only prefixes.
    pub fn begin(params: &LstmParams, state: &CellState) -> Self {
        LstmTape {
            steps: Vec::new(),
            hh: SiteTape::begin(params.mode, &state.hh),
            ih: SiteTape::begin(params.mode, &state.ih),
            cell: SiteTape::begin(params.mode, &state.cell),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Gradients of the cell parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGrads {
    pub w_h: Matrix,
    pub w_x: Matrix,
    pub b: Matrix,
    pub hh: NormGrads,
    pub ih: NormGrads,
    pub cell: NormGrads,
}

impl LstmGrads {
    pub fn zeros(params: &LstmParams) -> Self {
        let n = params.hidden();
        LstmGrads {
            w_h: Matrix::zeros(4 * n, n),
            w_x: Matrix::zeros(4 * n, params.input()),
            b: Matrix::zeros(1, 4 * n),
            hh: NormGrads::zeros(4 * n),
            ih: NormGrads::zeros(4 * n),
            cell: NormGrads::zeros(n),
        }
    }
}

fn activate_gates(pre: &Matrix, n: usize) -> Matrix {
    let mut out = pre.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for v in &mut row[..3 * n] {
            *v = sigmoid(*v);
        }
        for v in &mut row[3 * n..] {
            *v = v.tanh();
        }
    }
    out
}

/// Advances `state` by one step and returns the new hidden state.
pub fn lstm_step(
    params: &LstmParams,
    state: &mut CellState,
    x: &Matrix,
    tape: Option<&mut LstmTape>,
) -> Result<Matrix> {
    let n = params.hidden();
    if x.cols() != params.input() || x.rows() != state.h.rows() {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            left: (state.h.rows(), params.input()),
            right: x.shape(),
        });
    }
    let a_hh = state.h.matmul_nt(&params.w_h)?;
    let mut a_ih = x.matmul_nt(&params.w_x)?;
    if params.bias_inside_norm {
        a_ih.add_row_broadcast(&params.b)?;
    }
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
    if !params.bias_inside_norm {
        pre.add_row_broadcast(&params.b)?;
    }
    let gates = activate_gates(&pre, n);

    let batch = x.rows();
    let mut c = Matrix::zeros(batch, n);
    for r in 0..batch {
        let g = gates.row(r);
        let c_prev = state.c.row(r);
        for (j, out) in c.row_mut(r).iter_mut().enumerate() {
            *out = g[j] * c_prev[j] + g[n + j] * g[3 * n + j];
        }
    }
    let y_cell = match tape.as_deref_mut() {
        Some(t) => t.cell.forward(&mut state.cell, &c, &params.norm_cell)?,
        None => apply(params.mode, &mut state.cell, &c, &params.norm_cell)?,
    };
    let tanh_cell = y_cell.tanh();
    let mut h = Matrix::zeros(batch, n);
    for r in 0..batch {
        let g = gates.row(r);
        let tc = tanh_cell.row(r);
        for (j, out) in h.row_mut(r).iter_mut().enumerate() {
            *out = g[2 * n + j] * tc[j];
        }
    }

    let h_prev = std::mem::replace(&mut state.h, h.clone());
    let c_prev = std::mem::replace(&mut state.c, c.clone());
    if let Some(t) = tape {
        t.steps.push(LstmStepRecord {
            x: x.clone(),
            h_prev,
            c_prev,
            gates,
            c,
            y_hh,
            y_ih,
            y_cell,
            tanh_cell,
            h: h.clone(),
        });
    }
    Ok(h)
}

/// Backpropagation through the recorded steps.
///
/// `dh_seq[t]` is the gradient reaching `h^(t)` from outside the recurrence
/// (the readout). Gradients into the initial state are dropped.
pub fn lstm_backward(params: &LstmParams, tape: &LstmTape, dh_seq: &[Matrix]) -> Result<LstmGrads> {
    let steps = tape.len();
    if dh_seq.len() != steps || tape.hh.len() != steps || tape.ih.len() != steps || tape.cell.len() != steps {
        return Err(Error::Tape(format!(
            "{} upstream gradients for a tape of {steps} steps",
            dh_seq.len()
        )));
    }
    let mut grads = LstmGrads::zeros(params);
    if steps == 0 {
        return Ok(grads);
    }
    let n = params.hidden();
    let batch = tape.steps[0].h.rows();
    let stop = params.stop_window_gradient;
    let mut site_hh = tape.hh.backward();
    let mut site_ih = tape.ih.backward();
    let mut site_c = tape.cell.backward();
    let mut dh_next = Matrix::zeros(batch, n);
    let mut dc_next = Matrix::zeros(batch, n);

    for t in (0..steps).rev() {
        let rec = &tape.steps[t];
        let mut dh = dh_seq[t].clone();
        dh.add_assign(&dh_next)?;

        // h = σ(o) ⊙ tanh(y_cell)
        let mut dgates = Matrix::zeros(batch, 4 * n);
        let mut dy_cell = Matrix::zeros(batch, n);
        for r in 0..batch {
            let g = rec.gates.row(r);
            let tc = rec.tanh_cell.row(r);
            let dhr = dh.row(r);
            let dg = dgates.row_mut(r);
            for j in 0..n {
                let o = g[2 * n + j];
                dg[2 * n + j] = dhr[j] * tc[j] * o * (1.0 - o);
            }
            for (j, out) in dy_cell.row_mut(r).iter_mut().enumerate() {
                *out = dhr[j] * g[2 * n + j] * (1.0 - tc[j] * tc[j]);
            }
        }
        // c = σ(f) ⊙ c_prev + σ(i) ⊙ tanh(g)
        let mut dc = site_c.step(t, &dy_cell, &params.norm_cell, stop, &mut grads.cell)?;
        dc.add_assign(&dc_next)?;
        for r in 0..batch {
            let g = rec.gates.row(r);
            let cp = rec.c_prev.row(r);
            let dcr = dc.row(r);
            let dg = dgates.row_mut(r);
            let dn = dc_next.row_mut(r);
            for j in 0..n {
                let (f, i, gg) = (g[j], g[n + j], g[3 * n + j]);
                dg[j] = dcr[j] * cp[j] * f * (1.0 - f);
                dg[n + j] = dcr[j] * gg * i * (1.0 - i);
                dg[3 * n + j] = dcr[j] * i * (1.0 - gg * gg);
                dn[j] = dcr[j] * f;
            }
        }

        if !params.bias_inside_norm {
            grads.b.add_assign(&dgates.sum_rows())?;
        }
        let da_hh = site_hh.step(t, &dgates, &params.norm_hh, stop, &mut grads.hh)?;
        let da_ih = site_ih.step(t, &dgates, &params.norm_ih, stop, &mut grads.ih)?;
        grads.w_h.add_matmul_tn(&da_hh, &rec.h_prev)?;
        dh_next = da_hh.matmul(&params.w_h)?;
        grads.w_x.add_matmul_tn(&da_ih, &rec.x)?;
        if params.bias_inside_norm {
            grads.b.add_assign(&da_ih.sum_rows())?;
        }
    }
    Ok(grads)
}
