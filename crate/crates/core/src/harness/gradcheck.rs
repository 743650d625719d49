use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cells::{
    backward_sequence, forward_sequence, LstmConfig, LstmModel, LstmParams, NormMode, OutputSchedule, Readout,
};
use crate::error::{Error, Result};
use crate::harness::reference::{cross_entropy, Dd, Perturbation, Real, RefModel};
use crate::numkit::{cross_entropy_logits, rng_gaussian, Matrix, Rng};

/// Central-difference formula for the numerical derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error `O(h²)`.
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error `O(h⁴)`.
    FivePoint,
}

impl std::str::FromStr for Stencil {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "3" | "three-point" => Ok(Stencil::ThreePoint),
            "5" | "five-point" => Ok(Stencil::FivePoint),
            other => Err(format!("unknown stencil `{other}` (3, 5)")),
        }
    }
}

/// Sizes and options of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSpec {
    pub mode: NormMode,
    /// Hidden width.
    pub n: usize,
    /// Input width.
    pub d: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub batch: usize,
    pub classes: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub bias_inside_norm: bool,
    pub stop_window_gradient: bool,
    /// Central-difference step.
    pub h: f64,
    pub stencil: Stencil,
    pub tolerance: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            mode: NormMode::Atn,
            n: 4,
            d: 3,
            k: 3,
            t: 10,
            batch: 2,
            classes: 3,
            seed: 0,
            epsilon: crate::norm::DEFAULT_EPSILON,
            bias_inside_norm: false,
            stop_window_gradient: false,
            h: 1e-5,
            stencil: Stencil::FivePoint,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub name: &'static str,
    pub entries: usize,
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over the group.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub spec: GradcheckSpec,
    pub loss: f64,
    /// Largest gap between the model's outputs and the reference forward
    /// pass that produces the numerical gradients.
    pub forward_max_diff: f64,
    pub groups: Vec<GroupError>,
}

/// Bound on [`GradcheckReport::forward_max_diff`] for the two forward
/// passes to count as the same function.
pub const FORWARD_TOLERANCE: f64 = 1e-10;

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.forward_max_diff <= FORWARD_TOLERANCE && self.groups.iter().all(|g| g.max_rel_error <= self.spec.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.spec;
        writeln!(
            f,
            "gradcheck mode={} n={} d={} k={} T={} batch={} seed={} bias_inside_norm={} stop_window_gradient={} h={:e}",
            s.mode, s.n, s.d, s.k, s.t, s.batch, s.seed, s.bias_inside_norm, s.stop_window_gradient, s.h
        )?;
        let fwd = if self.forward_max_diff <= FORWARD_TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        writeln!(
            f,
            "  {:<14} reference max abs diff {:.3e}  {fwd}",
            "forward", self.forward_max_diff
        )?;
        for g in &self.groups {
            let verdict = if g.max_rel_error <= s.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "  {:<14} {:>5} entries  max rel err {:.3e}  {verdict}",
                g.name, g.entries, g.max_rel_error
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            s.tolerance
        )
    }
}

/// Relative error used by every check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Random model whose normalization gains and biases are moved away from
/// their initial values, so their gradients are exercised.
pub fn random_model(spec: &GradcheckSpec, rng: &mut Rng) -> Result<LstmModel> {
    let cfg = LstmConfig {
        input: spec.d,
        hidden: spec.n,
        mode: spec.mode,
        k: spec.k,
        epsilon: spec.epsilon,
        norm_trainable: true,
        bias_inside_norm: spec.bias_inside_norm,
    };
    let mut cell = LstmParams::new(&cfg, rng)?;
    cell.stop_window_gradient = spec.stop_window_gradient;
    for p in [&mut cell.norm_hh, &mut cell.norm_ih, &mut cell.norm_cell] {
        for v in p.gamma.data_mut() {
            *v += rng.uniform(-0.5, 0.5);
        }
        for v in p.beta.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    for v in cell.b.data_mut() {
        *v += rng.uniform(-0.5, 0.5);
    }
    let mut readout = Readout::new(spec.n, spec.classes, rng);
    for v in readout.b.data_mut() {
        *v = rng.uniform(-0.5, 0.5);
    }
    Ok(LstmModel { cell, readout })
}

fn sequence_loss(outs: &[Matrix], targets: &[Vec<usize>]) -> Result<(f64, Vec<Matrix>)> {
    let scale = 1.0 / outs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(outs.len());
    for (o, tg) in outs.iter().zip(targets) {
        let (l, mut g) = cross_entropy_logits(o, tg)?;
        total += l * scale;
        g.scale_in_place(scale);
        grads.push(g);
    }
    Ok((total, grads))
}

/// Compares [`backward_sequence`] against central differences of the mean
/// per-step cross-entropy on one random batch.
///
/// With `h = 1e-5` the three-point formula's truncation error is around
/// `1e-11` in absolute terms, which already exceeds a `1e-6` relative
/// tolerance on gradient entries of order `1e-5`; the five-point formula
/// removes that floor.
///
/// The differences are taken on an independent double-double forward pass
/// (see [`reference`](crate::harness::reference)), which must agree with
/// the model's own outputs to [`FORWARD_TOLERANCE`].
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    if spec.n == 0 || spec.d == 0 || spec.k == 0 || spec.t == 0 || spec.batch == 0 || spec.classes < 2 {
        return Err(Error::InvalidArgument(
            "gradcheck sizes must be positive (classes >= 2)".into(),
        ));
    }
    if !(spec.h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let model = random_model(spec, &mut rng)?;
    let xs: Vec<Matrix> = (0..spec.t)
        .map(|_| rng_gaussian(&mut rng, 0.0, 1.0, (spec.batch, spec.d)))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<usize>> = (0..spec.t)
        .map(|_| (0..spec.batch).map(|_| rng.below(spec.classes)).collect())
        .collect();
    let schedule = OutputSchedule::EveryStep;

    let (outs, tape) = forward_sequence(&model, &xs, schedule)?;
    let (loss, d_outs) = sequence_loss(&outs, &targets)?;
    let grads = backward_sequence(&model, &tape, &d_outs)?;
    let analytic: Vec<(&'static str, Matrix)> = grads.groups(&model).into_iter().map(|(n, g)| (n, g.clone())).collect();

    let rows: Vec<Vec<Vec<f64>>> = (0..spec.batch)
        .map(|r| xs.iter().map(|x| x.row(r).to_vec()).collect())
        .collect();
    let reference_loss = |perturb: Option<Perturbation>| -> Dd {
        let m = RefModel::new_dd(&model, perturb);
        let mut total = Dd::new(0.0);
        for (r, seq) in rows.iter().enumerate() {
            for (t, z) in m.forward_row(seq).iter().enumerate() {
                total = total + cross_entropy(z, targets[t][r]);
            }
        }
        total / Dd::new((spec.batch * spec.t) as f64)
    };

    let unperturbed = RefModel::new_dd(&model, None);
    let mut forward_max_diff: f64 = 0.0;
    for (r, seq) in rows.iter().enumerate() {
        for (t, z) in unperturbed.forward_row(seq).iter().enumerate() {
            for (j, v) in z.iter().enumerate() {
                forward_max_diff = forward_max_diff.max((v.to_f64() - outs[t].get(r, j)).abs());
            }
        }
    }

    let mut groups = Vec::with_capacity(analytic.len());
    for (gi, (name, a)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for idx in 0..a.len() {
            let at = |steps: f64| reference_loss(Some((gi, idx, steps * spec.h)));
            let numeric = match spec.stencil {
                Stencil::ThreePoint => (at(1.0) - at(-1.0)) / Dd::new(2.0 * spec.h),
                Stencil::FivePoint => {
                    let near = (at(1.0) - at(-1.0)) * Dd::new(8.0);
                    let far = at(2.0) - at(-2.0);
                    (near - far) / Dd::new(12.0 * spec.h)
                }
            }
            .to_f64();
            worst = worst.max(relative_error(a.data()[idx], numeric));
        }
        groups.push(GroupError {
            name,
            entries: a.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        spec: spec.clone(),
        loss,
        forward_max_diff,
        groups,
    })
}
