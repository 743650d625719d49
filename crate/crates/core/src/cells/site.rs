use crate::cells::NormMode;
use crate::error::{Error, Result};
use crate::norm::{
    atn_forward_step, ln_backward, ln_forward, AtnAccumulator, AtnBuffer, AtnTape, LnCache, NormGrads, NormParams,
};
use crate::numkit::Matrix;

/// Forward record of one normalization site over a sequence.
#[derive(Clone, Debug)]
pub enum SiteTape {
    Identity { steps: usize },
    Ln(Vec<LnCache>),
    Atn(AtnTape),
}

impl SiteTape {
    pub(crate) fn begin(mode: NormMode, buffer: &AtnBuffer) -> Self {
        match mode {
            NormMode::Plain => SiteTape::Identity { steps: 0 },
            NormMode::Ln => SiteTape::Ln(Vec::new()),
            NormMode::Atn => SiteTape::Atn(AtnTape::resume(buffer)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SiteTape::Identity { steps } => *steps,
            SiteTape::Ln(caches) => caches.len(),
            SiteTape::Atn(tape) => tape.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn atn(&self) -> Option<&AtnTape> {
        match self {
            SiteTape::Atn(tape) => Some(tape),
            _ => None,
        }
    }

    pub(crate) fn forward(&mut self, buffer: &mut AtnBuffer, a: &Matrix, params: &NormParams) -> Result<Matrix> {
        match self {
            SiteTape::Identity { steps } => {
                *steps += 1;
                Ok(a.clone())
            }
            SiteTape::Ln(caches) => {
                let (y, cache) = ln_forward(a, params)?;
                caches.push(cache);
                Ok(y)
            }
            SiteTape::Atn(tape) => atn_forward_step(buffer, a, params, Some(tape)),
        }
    }

    /// Starts a reverse-time pass over the recorded steps.
    pub(crate) fn backward(&self) -> SiteBackward<'_> {
        SiteBackward {
            tape: self,
            atn: self.atn().map(AtnAccumulator::new),
        }
    }
}

/// Gradient routing through one site, fed one step at a time from the last
/// step backwards.
pub(crate) struct SiteBackward<'a> {
    tape: &'a SiteTape,
    atn: Option<AtnAccumulator>,
}

impl SiteBackward<'_> {
    /// Feeds `dy` of step `t` and returns the complete gradient w.r.t. that
    /// step's input.
    pub(crate) fn step(
        &mut self,
        t: usize,
        dy: &Matrix,
        params: &NormParams,
        stop_window_gradient: bool,
        grads: &mut NormGrads,
    ) -> Result<Matrix> {
        if t >= self.tape.len() {
            return Err(Error::Tape(format!(
                "site step {t} out of {} recorded",
                self.tape.len()
            )));
        }
        match (self.tape, &mut self.atn) {
            (SiteTape::Identity { .. }, _) => Ok(dy.clone()),
            (SiteTape::Ln(caches), _) => {
                let (da, g) = ln_backward(&caches[t], dy, params)?;
                grads.gamma.add_assign(&g.gamma)?;
                grads.beta.add_assign(&g.beta)?;
                Ok(da)
            }
            (SiteTape::Atn(tape), Some(acc)) => {
                acc.feed(tape, t, dy, params, stop_window_gradient, grads)?;
                acc.take(tape, t)
            }
            (SiteTape::Atn(_), None) => unreachable!("accumulator created with the tape"),
        }
    }
}

/// Forward through a site without recording anything.
pub(crate) fn apply(mode: NormMode, buffer: &mut AtnBuffer, a: &Matrix, params: &NormParams) -> Result<Matrix> {
    match mode {
        NormMode::Plain => Ok(a.clone()),
        NormMode::Ln => Ok(ln_forward(a, params)?.0),
        NormMode::Atn => atn_forward_step(buffer, a, params, None),
    }
}
