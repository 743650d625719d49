use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::NormMode;
use crate::error::{Error, Result};
use crate::norm::DEFAULT_EPSILON;
use crate::optim::OptimizerKind;
use crate::tasks::TaskKind;

/// Everything one training run depends on.
///
/// Config files are flat TOML. An optional `[quick]` table holds overrides
/// applied by [`TrainConfig::load`] when the quick preset is requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    #[serde(rename = "T", alias = "t")]
    pub t: usize,
    pub mode: NormMode,
    #[serde(default = "default_k")]
    pub k: usize,
    pub hidden: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Global-norm clipping threshold; `0` disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub gamma_beta_trainable: bool,
    #[serde(default)]
    pub bias_inside_norm: bool,
    #[serde(default)]
    pub stop_window_gradient: bool,
    #[serde(default)]
    pub seed: u64,
    pub iterations: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Validation batch size; defaults to `batch`.
    #[serde(default)]
    pub eval_batch: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Writes elapsed seconds into `wall_time`; off keeps output byte-stable.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Window lengths for `ksweep`.
    #[serde(default)]
    pub k_list: Vec<usize>,
    /// Pixel noise variance for `mnist-pixel`.
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default)]
    pub mnist_train_images: Option<PathBuf>,
    #[serde(default)]
    pub mnist_train_labels: Option<PathBuf>,
    #[serde(default)]
    pub mnist_test_images: Option<PathBuf>,
    #[serde(default)]
    pub mnist_test_labels: Option<PathBuf>,
}

fn default_k() -> usize {
    1
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

fn default_eval_every() -> usize {
    100
}

impl TrainConfig {
    /// A small copy-task run; a starting point for tests and examples.
    pub fn small(task: TaskKind, t: usize, mode: NormMode) -> Self {
        TrainConfig {
            task,
            t,
            mode,
            k: 1,
            hidden: 16,
            batch: 8,
            optimizer: OptimizerKind::Rmsprop,
            lr: 1e-3,
            clip_norm: 0.0,
            epsilon: DEFAULT_EPSILON,
            gamma_beta_trainable: true,
            bias_inside_norm: false,
            stop_window_gradient: false,
            seed: 0,
            iterations: 10,
            eval_every: 5,
            eval_batch: None,
            output_dir: None,
            record_wall_time: false,
            k_list: Vec::new(),
            noise_var: 0.0,
            mnist_train_images: None,
            mnist_train_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
        }
    }

    /// Reads a config file, applying its `[quick]` table when `quick` is set.
    pub fn load(path: &Path, quick: bool) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text, quick, &[])
    }

    /// Parses config text. `overrides` are `key=value` pairs in TOML value
    /// syntax (bare strings are accepted), applied last.
    pub fn parse(text: &str, quick: bool, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message()))?;
        let quick_table = match table.remove("quick") {
            Some(toml::Value::Table(t)) => Some(t),
            Some(_) => return Err(Error::config("quick", "must be a table")),
            None => None,
        };
        if quick {
            let q = quick_table.ok_or_else(|| Error::config("quick", "config has no [quick] preset"))?;
            table.extend(q);
        }
        for o in overrides {
            let (key, value) = parse_override(o)?;
            table.insert(key, value);
        }
        let cfg: TrainConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<file>".to_string());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let min_t = match self.task {
            TaskKind::Copy => 1,
            TaskKind::Add => 2,
            TaskKind::Denoise => 11,
            TaskKind::MnistPixel => 0,
        };
        if self.t < min_t {
            return Err(Error::config("T", format!("{} needs T >= {min_t}", self.task)));
        }
        if self.k == 0 {
            return Err(Error::config("k", "window length must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.eval_batch == Some(0) {
            return Err(Error::config("eval_batch", "must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be a finite non-negative number"));
        }
        if !(self.clip_norm >= 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::config("clip_norm", "must be >= 0 (0 disables clipping)"));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", "must be finite and non-negative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(Error::config("noise_var", "must be finite and non-negative"));
        }
        if self.k_list.contains(&0) {
            return Err(Error::config("k_list", "window lengths must be at least 1"));
        }
        if self.stop_window_gradient && self.mode != NormMode::Atn {
            return Err(Error::config(
                "stop_window_gradient",
                "only meaningful with mode = \"atn\"",
            ));
        }
        Ok(())
    }

    pub fn eval_batch(&self) -> usize {
        self.eval_batch.unwrap_or(self.batch)
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}
