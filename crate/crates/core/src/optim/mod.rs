//! First-order optimizers and global-norm gradient clipping.
//!
//! Parameters and gradients are passed as parallel slices of matrices. The
//! optimizer allocates its per-parameter state on the first step and checks
//! every later call against those shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (sgd, rmsprop, adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// RMSProp decay.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Self::rmsprop(lr)
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            lr,
            rho: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Self::rmsprop(lr)
        }
    }

    pub fn with_kind(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            ..Self::rmsprop(lr)
        }
    }
}

/// Optimizer with its accumulated state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// First moments (Adam only).
    m: Vec<Matrix>,
    /// Second moments (RMSProp and Adam).
    v: Vec<Matrix>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be non-negative",
                config.lr
            )));
        }
        Ok(Optimizer {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Second-moment accumulators, empty before the first step.
    pub fn second_moments(&self) -> &[Matrix] {
        &self.v
    }

    fn check(&mut self, params: &[&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        let needs_state = self.config.kind != OptimizerKind::Sgd;
        if needs_state && self.v.is_empty() {
            self.v = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.m = self.v.clone();
            }
        } else if needs_state {
            if self.v.len() != params.len() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer state holds {} tensors, step got {}",
                    self.v.len(),
                    params.len()
                )));
            }
            for (v, p) in self.v.iter().zip(params) {
                if v.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "optimizer state",
                        left: v.shape(),
                        right: p.shape(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        self.check(params, grads)?;
        self.steps += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-c.lr, g)?;
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    let pd = p.data_mut();
                    for ((pi, &gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = c.rho * *vi + (1.0 - c.rho) * gi * gi;
                        *pi -= c.lr * gi / (vi.sqrt() + c.eps);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let pd = p.data_mut();
                    for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *pi -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Joint L2 norm of a gradient set.
pub fn global_norm(grads: &[&Matrix]) -> f64 {
    grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the joint norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Matrix], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm {max_norm} must be positive")));
    }
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    Ok(norm)
}
