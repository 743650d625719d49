use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::{forward_sequence, NormMode, SiteTape};
use crate::error::{Error, Result};
use crate::harness::train::{build_model, run_training_to, DataSource};
use crate::harness::TrainConfig;
use crate::norm::batch_averaged_stats;
use crate::numkit::Matrix;

/// Post-normalization mean and variance over the hidden axis at one site
/// and step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub site: String,
    pub t: usize,
    pub mean: f64,
    pub var: f64,
    /// For layer normalization: the variance the output should have,
    /// `σ²/(σ²+ε)` per row, batch-averaged.
    #[serde(skip)]
    pub expected_var: Option<f64>,
}

pub const SITES: [&str; 3] = ["hh", "ih", "cell"];

fn expected_ln_var(site: &SiteTape, t: usize) -> Option<f64> {
    match site {
        SiteTape::Ln(caches) => {
            let c = &caches[t];
            let sum: f64 = c.var.iter().map(|v| v / (v + c.epsilon)).sum();
            Some(sum / c.var.len() as f64)
        }
        _ => None,
    }
}

/// Statistics of every normalized site at every step, taken on the forward
/// pass of training iteration `cfg.iterations`: the model is trained for
/// `iterations − 1` steps and then run on the next training batch.
/// `iterations = 1` inspects the freshly initialized model.
pub fn run_stats(cfg: &TrainConfig) -> Result<Vec<StatsRecord>> {
    cfg.validate()?;
    if cfg.mode == NormMode::Plain {
        return Err(Error::config("mode", "stats need a normalized model (ln or atn)"));
    }
    if cfg.gamma_beta_trainable {
        return Err(Error::config(
            "gamma_beta_trainable",
            "stats are taken without trainable gain and bias; set it to false",
        ));
    }
    if cfg.iterations == 0 {
        return Err(Error::config(
            "iterations",
            "stats are taken during an iteration; use at least 1",
        ));
    }
    let model = if cfg.iterations == 1 {
        build_model(cfg)?
    } else {
        let mut pre = cfg.clone();
        pre.iterations -= 1;
        pre.eval_every = pre.iterations;
        run_training_to(&pre, None)?.model
    };
    let mut data = DataSource::new(cfg)?;
    for _ in 1..cfg.iterations {
        data.next_batch()?;
    }
    let batch = data.next_batch()?;
    let (_, tape) = forward_sequence(&model, &batch.inputs, batch.meta.task.schedule())?;
    let cell = &tape.cell;
    let mut out = Vec::with_capacity(cell.len() * 3);
    for (t, step) in cell.steps.iter().enumerate() {
        let sites: [(&str, &Matrix, &SiteTape); 3] = [
            ("hh", &step.y_hh, &cell.hh),
            ("ih", &step.y_ih, &cell.ih),
            ("cell", &step.y_cell, &cell.cell),
        ];
        for (name, y, site) in sites {
            let (mean, var) = batch_averaged_stats(y);
            out.push(StatsRecord {
                site: name.to_string(),
                t,
                mean,
                var,
                expected_var: expected_ln_var(site, t),
            });
        }
    }
    Ok(out)
}

pub fn write_stats(path: &Path, records: &[StatsRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Per-step series of one site.
pub fn site_series<'a>(records: &'a [StatsRecord], site: &str) -> Vec<&'a StatsRecord> {
    let mut v: Vec<&StatsRecord> = records.iter().filter(|r| r.site == site).collect();
    v.sort_by_key(|r| r.t);
    v
}

/// Population standard deviation of the per-step means of one site.
pub fn mean_spread(records: &[StatsRecord], site: &str) -> f64 {
    let means: Vec<f64> = site_series(records, site).iter().map(|r| r.mean).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64).sqrt()
}
