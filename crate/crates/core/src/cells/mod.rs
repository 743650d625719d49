//! Recurrent cells with pluggable normalization and exact BPTT.
//!
//! The LSTM is the main model; [`rnn`] holds a vanilla tanh RNN used for
//! small experiments. Each cell normalizes three sites (recurrent
//! preactivation, input preactivation and cell/output) with the mode chosen
//! in [`NormMode`].

mod lstm;
mod model;
pub mod rnn;
mod site;

use serde::{Deserialize, Serialize};

use crate::numkit::{Matrix, Rng};

pub use lstm::{
    lstm_backward, lstm_step, scale_weight_matrix, scale_weights, CellState, LstmConfig, LstmGrads, LstmParams,
    LstmStepRecord, LstmTape, WeightMatrix,
};
pub use model::{
    backward_sequence, forward_sequence, forward_sequence_from, predict, LstmModel, ModelGrads, OutputSchedule,
    Readout, SequenceTape,
};
pub use site::SiteTape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Plain,
    Ln,
    Atn,
}

impl std::str::FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "plain" | "none" => Ok(NormMode::Plain),
            "ln" => Ok(NormMode::Ln),
            "atn" => Ok(NormMode::Atn),
            other => Err(format!("unknown normalization `{other}` (plain, ln, atn)")),
        }
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::Plain => "plain",
            NormMode::Ln => "ln",
            NormMode::Atn => "atn",
        })
    }
}

/// `rows × cols` drawn from `U(-1/√fan_in, 1/√fan_in)`.
pub(crate) fn init_uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{ln_forward, NormParams};
    use crate::numkit::rng_gaussian;

    fn config(input: usize, hidden: usize, mode: NormMode, k: usize) -> LstmConfig {
        LstmConfig {
            input,
            hidden,
            mode,
            k,
            epsilon: 1e-5,
            norm_trainable: true,
            bias_inside_norm: false,
        }
    }

    fn model(input: usize, hidden: usize, outputs: usize, mode: NormMode, k: usize, seed: u64) -> LstmModel {
        let mut rng = Rng::new(seed);
        let cell = LstmParams::new(&config(input, hidden, mode, k), &mut rng).unwrap();
        let readout = Readout::new(hidden, outputs, &mut rng);
        LstmModel { cell, readout }
    }

    fn inputs(t: usize, batch: usize, d: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = Rng::new(seed);
        (0..t)
            .map(|_| rng_gaussian(&mut rng, 0.0, 1.0, (batch, d)).unwrap())
            .collect()
    }

    /// Perturbs every trainable parameter of random-init norms so that gamma
    /// and beta are not at their trivial values.
    fn jitter_norms(m: &mut LstmModel, seed: u64) {
        let mut rng = Rng::new(seed);
        for p in [&mut m.cell.norm_hh, &mut m.cell.norm_ih, &mut m.cell.norm_cell] {
            for v in p.gamma.data_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
            for v in p.beta.data_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
        }
    }

    fn probe_loss(outs: &[Matrix], probes: &[Matrix]) -> f64 {
        outs.iter()
            .zip(probes)
            .map(|(o, r)| o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over every parameter entry.
    fn worst_fd_error(m: &LstmModel, xs: &[Matrix], schedule: OutputSchedule, seed: u64) -> f64 {
        let (outs, tape) = forward_sequence(m, xs, schedule).unwrap();
        let mut rng = Rng::new(seed);
        let probes: Vec<Matrix> = outs
            .iter()
            .map(|o| rng_gaussian(&mut rng, 0.0, 1.0, o.shape()).unwrap())
            .collect();
        let grads = backward_sequence(m, &tape, &probes).unwrap();
        let analytic: Vec<Matrix> = grads.groups(m).into_iter().map(|(_, g)| g.clone()).collect();
        let names: Vec<&str> = m.param_groups().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), analytic.len());

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = m.clone();
        for (gi, a) in analytic.iter().enumerate() {
            for idx in 0..a.len() {
                let orig = probe.param_groups()[gi].1.data()[idx];
                probe.param_groups_mut()[gi].1.data_mut()[idx] = orig + h;
                let lp = probe_loss(&predict(&probe, xs, schedule).unwrap(), &probes);
                probe.param_groups_mut()[gi].1.data_mut()[idx] = orig - h;
                let lm = probe_loss(&predict(&probe, xs, schedule).unwrap(), &probes);
                probe.param_groups_mut()[gi].1.data_mut()[idx] = orig;
                let num = (lp - lm) / (2.0 * h);
                let an = a.data()[idx];
                let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-8);
                // Entries whose true gradient sits at the roundoff floor
                // carry no signal; compare them absolutely.
                let err = if (an - num).abs() < 1e-9 { 0.0 } else { rel };
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn zero_network_keeps_hidden_state_at_zero() {
        let mut m = model(3, 4, 2, NormMode::Plain, 1, 1);
        m.cell.w_h.fill(0.0);
        m.cell.w_x.fill(0.0);
        m.cell.b.fill(0.0);
        let xs = inputs(5, 2, 3, 2);
        let (_, tape) = forward_sequence(&m, &xs, OutputSchedule::EveryStep).unwrap();
        for step in &tape.cell.steps {
            assert!(step.h.data().iter().all(|&v| v == 0.0));
            assert!(step.c.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let m = model(2, 3, 1, NormMode::Plain, 1, 3);
        assert_eq!(&m.cell.b.data()[..3], &[1.0; 3]);
        assert!(m.cell.b.data()[3..].iter().all(|&v| v == 0.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(m.cell.w_h.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn atn_with_window_one_matches_layer_norm() {
        let ln = model(3, 5, 4, NormMode::Ln, 1, 7);
        let mut atn = ln.clone();
        atn.cell.mode = NormMode::Atn;
        let xs = inputs(12, 3, 3, 8);
        let a = predict(&ln, &xs, OutputSchedule::EveryStep).unwrap();
        let b = predict(&atn, &xs, OutputSchedule::EveryStep).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y).unwrap() <= 1e-12);
        }
    }

    /// Straight-line reimplementation of an ATN-LSTM with explicit windows.
    fn oracle_atn_lstm(m: &LstmModel, xs: &[Matrix]) -> Vec<Matrix> {
        let p = &m.cell;
        let n = p.hidden();
        let batch = xs[0].rows();
        let norm = |hist: &[Matrix], np: &NormParams| -> Matrix {
            let cur = hist.last().unwrap();
            let lo = hist.len().saturating_sub(p.k);
            let win = &hist[lo..];
            let mut out = cur.clone();
            for r in 0..batch {
                let vals: Vec<f64> = win.iter().flat_map(|w| w.row(r).to_vec()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                    *o = np.gamma.data()[j] * (cur.row(r)[j] - mean) / (var + np.epsilon).sqrt() + np.beta.data()[j];
                }
            }
            out
        };
        let (mut hh, mut ih, mut cc) = (Vec::new(), Vec::new(), Vec::new());
        let mut h = Matrix::zeros(batch, n);
        let mut c = Matrix::zeros(batch, n);
        let mut outs = Vec::new();
        for x in xs {
            hh.push(h.matmul(&p.w_h.transpose()).unwrap());
            ih.push(x.matmul(&p.w_x.transpose()).unwrap());
            let pre = norm(&hh, &p.norm_hh).add(&norm(&ih, &p.norm_ih)).unwrap();
            let mut new_c = Matrix::zeros(batch, n);
            let mut gates = pre.clone();
            for r in 0..batch {
                for j in 0..4 * n {
                    let z = pre.get(r, j) + p.b.get(0, j);
                    gates.set(r, j, if j < 3 * n { 1.0 / (1.0 + (-z).exp()) } else { z.tanh() });
                }
                for j in 0..n {
                    new_c.set(
                        r,
                        j,
                        gates.get(r, j) * c.get(r, j) + gates.get(r, n + j) * gates.get(r, 3 * n + j),
                    );
                }
            }
            cc.push(new_c.clone());
            let yc = norm(&cc, &p.norm_cell);
            let mut new_h = Matrix::zeros(batch, n);
            for r in 0..batch {
                for j in 0..n {
                    new_h.set(r, j, gates.get(r, 2 * n + j) * yc.get(r, j).tanh());
                }
            }
            h = new_h;
            c = new_c;
            let mut z = h.matmul(&m.readout.w.transpose()).unwrap();
            z.add_row_broadcast(&m.readout.b).unwrap();
            outs.push(z);
        }
        outs
    }

    #[test]
    fn atn_lstm_matches_straight_line_oracle() {
        let mut m = model(3, 4, 2, NormMode::Atn, 3, 11);
        jitter_norms(&mut m, 12);
        let xs = inputs(9, 2, 3, 13);
        let got = predict(&m, &xs, OutputSchedule::EveryStep).unwrap();
        let want = oracle_atn_lstm(&m, &xs);
        for (g, w) in got.iter().zip(&want) {
            assert!(g.max_abs_diff(w).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn single_step_sequence_equals_one_cell_step() {
        let m = model(3, 4, 2, NormMode::Atn, 4, 21);
        let xs = inputs(1, 2, 3, 22);
        let out = predict(&m, &xs, OutputSchedule::FinalStep).unwrap();
        let mut state = CellState::new(&m.cell, 2).unwrap();
        let h = lstm_step(&m.cell, &mut state, &xs[0], None).unwrap();
        let mut z = h.matmul_nt(&m.readout.w).unwrap();
        z.add_row_broadcast(&m.readout.b).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].max_abs_diff(&z).unwrap() <= 1e-12);
    }

    #[test]
    fn split_forward_resumes_exactly() {
        let m = model(2, 3, 2, NormMode::Atn, 4, 31);
        let xs = inputs(10, 2, 2, 32);
        let whole = predict(&m, &xs, OutputSchedule::EveryStep).unwrap();
        let mut state = CellState::new(&m.cell, 2).unwrap();
        let (mut a, _) = forward_sequence_from(&m, &mut state, &xs[..6], OutputSchedule::EveryStep).unwrap();
        let (b, _) = forward_sequence_from(&m, &mut state, &xs[6..], OutputSchedule::EveryStep).unwrap();
        a.extend(b);
        for (x, y) in whole.iter().zip(&a) {
            assert!(x.max_abs_diff(y).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn output_shapes_follow_schedule() {
        let m = model(10, 6, 9, NormMode::Atn, 5, 41);
        let xs = inputs(30, 4, 10, 42);
        let every = predict(&m, &xs, OutputSchedule::EveryStep).unwrap();
        assert_eq!(every.len(), 30);
        assert!(every.iter().all(|o| o.shape() == (4, 9)));
        let last = predict(&m, &xs, OutputSchedule::FinalStep).unwrap();
        assert_eq!(last.len(), 1);
        assert!(last[0].max_abs_diff(&every[29]).unwrap() == 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = model(3, 4, 2, NormMode::Atn, 3, 51);
        let xs = inputs(6, 2, 3, 52);
        let (outs, tape) = forward_sequence(&m, &xs, OutputSchedule::EveryStep).unwrap();
        let zeros: Vec<Matrix> = outs.iter().map(|o| Matrix::zeros(o.rows(), o.cols())).collect();
        let g = backward_sequence(&m, &tape, &zeros).unwrap();
        for (_, m) in g.groups(&m) {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_wrong_gradient_count() {
        let m = model(3, 4, 2, NormMode::Plain, 1, 53);
        let xs = inputs(4, 2, 3, 54);
        let (_, tape) = forward_sequence(&m, &xs, OutputSchedule::EveryStep).unwrap();
        assert!(backward_sequence(&m, &tape, &[Matrix::zeros(2, 2)]).is_err());
    }

    #[test]
    fn plain_lstm_gradients_match_finite_differences() {
        let m = model(2, 3, 2, NormMode::Plain, 1, 61);
        let xs = inputs(5, 2, 2, 62);
        let worst = worst_fd_error(&m, &xs, OutputSchedule::EveryStep, 63);
        assert!(worst < 1e-6, "worst relative error {worst:e}");
    }

    #[test]
    fn ln_lstm_gradients_match_finite_differences() {
        let mut m = model(2, 3, 2, NormMode::Ln, 1, 64);
        jitter_norms(&mut m, 65);
        let xs = inputs(5, 2, 2, 66);
        let worst = worst_fd_error(&m, &xs, OutputSchedule::EveryStep, 67);
        assert!(worst < 1e-6, "worst relative error {worst:e}");
    }

    #[test]
    fn atn_lstm_gradients_match_finite_differences() {
        let mut m = model(3, 4, 2, NormMode::Atn, 3, 71);
        jitter_norms(&mut m, 72);
        let xs = inputs(10, 2, 3, 73);
        let worst = worst_fd_error(&m, &xs, OutputSchedule::EveryStep, 74);
        assert!(worst < 1e-6, "worst relative error {worst:e}");
    }

    #[test]
    fn atn_gradients_with_bias_inside_norm_and_final_readout() {
        let mut m = model(2, 3, 1, NormMode::Atn, 2, 75);
        m.cell.bias_inside_norm = true;
        jitter_norms(&mut m, 76);
        let mut rng = Rng::new(77);
        m.readout.norm = Some(NormParams::new(3, 1e-5, true));
        m.readout.w = init_uniform(&mut rng, 3, 3, 3);
        m.readout.b = Matrix::zeros(1, 3);
        let xs = inputs(7, 3, 2, 78);
        let worst = worst_fd_error(&m, &xs, OutputSchedule::FinalStep, 79);
        assert!(worst < 1e-6, "worst relative error {worst:e}");
    }

    #[test]
    fn stopping_window_gradient_changes_recurrent_gradient() {
        let mut m = model(3, 4, 2, NormMode::Atn, 3, 81);
        jitter_norms(&mut m, 82);
        let xs = inputs(8, 2, 3, 83);
        let (outs, tape) = forward_sequence(&m, &xs, OutputSchedule::EveryStep).unwrap();
        let ones: Vec<Matrix> = outs.iter().map(|o| Matrix::filled(o.rows(), o.cols(), 1.0)).collect();
        let full = backward_sequence(&m, &tape, &ones).unwrap();
        m.cell.stop_window_gradient = true;
        let cut = backward_sequence(&m, &tape, &ones).unwrap();
        assert!(full.cell.w_h.max_abs_diff(&cut.cell.w_h).unwrap() > 1e-6);
    }

    #[test]
    fn atn_output_is_invariant_to_recurrent_weight_scale() {
        let mut m = model(3, 4, 2, NormMode::Atn, 3, 91);
        for p in [&mut m.cell.norm_hh, &mut m.cell.norm_ih, &mut m.cell.norm_cell] {
            p.epsilon = 0.0;
        }
        let xs = inputs(8, 2, 3, 92);
        let base = predict(&m, &xs, OutputSchedule::EveryStep).unwrap();
        assert!(base.iter().all(Matrix::is_finite));
        for delta in [0.1, 3.0, 25.0] {
            let scaled = LstmModel {
                cell: scale_weights(&m.cell, delta).unwrap(),
                readout: m.readout.clone(),
            };
            let out = predict(&scaled, &xs, OutputSchedule::EveryStep).unwrap();
            // The first step sees h = 0, whose zero-variance window is
            // mapped to beta regardless of scale.
            for (a, b) in base.iter().zip(&out) {
                assert!(a.max_abs_diff(b).unwrap() <= 1e-10, "delta {delta}");
            }
        }
    }

    #[test]
    fn plain_output_depends_on_recurrent_weight_scale() {
        let m = model(3, 4, 2, NormMode::Plain, 1, 93);
        let xs = inputs(8, 2, 3, 94);
        let base = predict(&m, &xs, OutputSchedule::EveryStep).unwrap();
        let scaled = LstmModel {
            cell: scale_weights(&m.cell, 3.0).unwrap(),
            readout: m.readout.clone(),
        };
        let out = predict(&scaled, &xs, OutputSchedule::EveryStep).unwrap();
        assert!(base.last().unwrap().max_abs_diff(out.last().unwrap()).unwrap() > 1e-3);
        assert!(scale_weights(&m.cell, 0.0).is_err());
    }

    #[test]
    fn atn_output_is_invariant_to_input_sequence_scale() {
        let mut m = model(3, 4, 2, NormMode::Atn, 3, 95);
        for p in [&mut m.cell.norm_hh, &mut m.cell.norm_ih, &mut m.cell.norm_cell] {
            p.epsilon = 0.0;
        }
        let xs = inputs(8, 2, 3, 96);
        let scaled_xs: Vec<Matrix> = xs.iter().map(|x| x.scale(7.5)).collect();
        let a = predict(&m, &xs, OutputSchedule::EveryStep).unwrap();
        let b = predict(&m, &scaled_xs, OutputSchedule::EveryStep).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y).unwrap() <= 1e-10);
        }
        let in_scaled = LstmModel {
            cell: scale_weight_matrix(&m.cell, WeightMatrix::Input, 0.2).unwrap(),
            readout: m.readout.clone(),
        };
        let c = predict(&in_scaled, &xs, OutputSchedule::EveryStep).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert!(x.max_abs_diff(y).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = model(3, 4, 2, NormMode::Atn, 3, 101);
        let b = model(3, 4, 2, NormMode::Atn, 3, 101);
        assert_eq!(a, b);
        let xs = inputs(6, 2, 3, 102);
        assert_eq!(
            predict(&a, &xs, OutputSchedule::EveryStep).unwrap(),
            predict(&b, &xs, OutputSchedule::EveryStep).unwrap()
        );
    }

    #[test]
    fn ln_mode_uses_per_step_statistics() {
        let m = model(2, 3, 2, NormMode::Ln, 1, 111);
        let xs = inputs(3, 1, 2, 112);
        let mut state = CellState::new(&m.cell, 1).unwrap();
        let h0 = state.h.clone();
        lstm_step(&m.cell, &mut state, &xs[0], None).unwrap();
        let a_ih = xs[0].matmul_nt(&m.cell.w_x).unwrap();
        let (y, _) = ln_forward(&a_ih, &m.cell.norm_ih).unwrap();
        assert_eq!(y.shape(), (1, 12));
        assert!(h0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_mode_parses_and_prints() {
        for m in [NormMode::Plain, NormMode::Ln, NormMode::Atn] {
            assert_eq!(m.to_string().parse::<NormMode>().unwrap(), m);
        }
        assert!("batch".parse::<NormMode>().is_err());
    }

    mod rnn_tests {
        use super::super::rnn::*;
        use super::*;

        fn rnn_fd(mode: NormMode, k: usize, seed: u64) -> f64 {
            let mut rng = Rng::new(seed);
            let mut p = RnnParams::new(2, 3, 3, mode, k, 1e-5, &mut rng).unwrap();
            for np in [&mut p.norm_hh, &mut p.norm_ih, &mut p.norm_out] {
                for v in np.gamma.data_mut() {
                    *v += rng.uniform(-0.3, 0.3);
                }
                for v in np.beta.data_mut() {
                    *v += rng.uniform(-0.3, 0.3);
                }
            }
            let xs = inputs(6, 2, 2, seed + 1);
            let (ys, tape) = rnn_forward_sequence(&p, &xs).unwrap();
            let probes: Vec<Matrix> = ys
                .iter()
                .map(|y| rng_gaussian(&mut rng, 0.0, 1.0, y.shape()).unwrap())
                .collect();
            let grads = rnn_backward_sequence(&p, &tape, &probes).unwrap();
            let analytic: Vec<Matrix> = grads.groups(&p).into_iter().map(|(_, g)| g.clone()).collect();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            let mut q = p.clone();
            for (gi, a) in analytic.iter().enumerate() {
                for idx in 0..a.len() {
                    let orig = q.param_groups()[gi].1.data()[idx];
                    q.param_groups_mut()[gi].1.data_mut()[idx] = orig + h;
                    let lp = probe_loss(&rnn_forward_sequence(&q, &xs).unwrap().0, &probes);
                    q.param_groups_mut()[gi].1.data_mut()[idx] = orig - h;
                    let lm = probe_loss(&rnn_forward_sequence(&q, &xs).unwrap().0, &probes);
                    q.param_groups_mut()[gi].1.data_mut()[idx] = orig;
                    let num = (lp - lm) / (2.0 * h);
                    let an = a.data()[idx];
                    if (an - num).abs() >= 1e-9 {
                        worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-8));
                    }
                }
            }
            worst
        }

        #[test]
        fn rnn_gradients_match_finite_differences() {
            for (mode, k) in [(NormMode::Plain, 1), (NormMode::Ln, 1), (NormMode::Atn, 3)] {
                let worst = rnn_fd(mode, k, 201);
                assert!(worst < 1e-6, "{mode}: worst relative error {worst:e}");
            }
        }

        #[test]
        fn rnn_rejects_wrong_input_width() {
            let mut rng = Rng::new(5);
            let p = RnnParams::new(2, 3, 1, NormMode::Plain, 1, 1e-5, &mut rng).unwrap();
            let mut s = RnnState::new(&p, 1).unwrap();
            assert!(rnn_step(&p, &mut s, &Matrix::zeros(1, 3), None).is_err());
        }
    }
}
