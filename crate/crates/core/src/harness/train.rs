use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cells::{backward_sequence, forward_sequence, predict, LstmConfig, LstmModel, LstmParams, Readout};
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::numkit::Rng;
use crate::optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig};
use crate::tasks::{gen_add, gen_copy, gen_denoise, load_mnist, pixel_batch, MnistSet, TaskBatch, TaskKind};

/// Seed offset of the training data stream relative to the model seed.
pub const DATA_SEED_OFFSET: u64 = 1;
/// Seed offset of the held-out validation data.
pub const VAL_SEED_OFFSET: u64 = 1_000_003;

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction of answer steps predicted correctly, for classification tasks.
    pub val_accuracy: Option<f64>,
    pub wall_time: f64,
    /// Gradient norm before clipping at this iteration.
    pub grad_norm: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 6] = [
        "iteration",
        "train_loss",
        "val_loss",
        "val_accuracy",
        "wall_time",
        "grad_norm",
    ];
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_row: MetricsRow,
    pub model: LstmModel,
}

/// Fresh model for `cfg`, drawn from `Rng::new(cfg.seed)`.
pub fn build_model(cfg: &TrainConfig) -> Result<LstmModel> {
    let mut rng = Rng::new(cfg.seed);
    let cell_cfg = LstmConfig {
        input: cfg.task.input_dim(),
        hidden: cfg.hidden,
        mode: cfg.mode,
        k: cfg.k,
        epsilon: cfg.epsilon,
        norm_trainable: cfg.gamma_beta_trainable,
        bias_inside_norm: cfg.bias_inside_norm,
    };
    let mut cell = LstmParams::new(&cell_cfg, &mut rng)?;
    cell.stop_window_gradient = cfg.stop_window_gradient;
    let readout = Readout::new(cfg.hidden, cfg.task.output_dim(), &mut rng);
    Ok(LstmModel { cell, readout })
}

/// Batches for one run: a training stream and a fixed validation batch.
pub struct DataSource {
    task: TaskKind,
    t: usize,
    batch: usize,
    rng: Rng,
    noise_var: f64,
    mnist: Option<MnistSet>,
    pub validation: TaskBatch,
}

fn mnist_paths(cfg: &TrainConfig, train: bool) -> Result<(PathBuf, PathBuf)> {
    let (img, lab, fi, fl) = if train {
        (
            &cfg.mnist_train_images,
            &cfg.mnist_train_labels,
            "mnist_train_images",
            "mnist_train_labels",
        )
    } else {
        (
            &cfg.mnist_test_images,
            &cfg.mnist_test_labels,
            "mnist_test_images",
            "mnist_test_labels",
        )
    };
    let img = img
        .clone()
        .ok_or_else(|| Error::config(fi, "required for mnist-pixel"))?;
    let lab = lab
        .clone()
        .ok_or_else(|| Error::config(fl, "required for mnist-pixel"))?;
    Ok((img, lab))
}

fn synthetic(task: TaskKind, t: usize, batch: usize, rng: &mut Rng) -> Result<TaskBatch> {
    match task {
        TaskKind::Copy => gen_copy(t, batch, rng),
        TaskKind::Add => gen_add(t, batch, rng),
        TaskKind::Denoise => gen_denoise(t, batch, rng),
        TaskKind::MnistPixel => Err(Error::InvalidArgument("mnist-pixel is not synthetic".into())),
    }
}

impl DataSource {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut val_rng = Rng::new(cfg.seed.wrapping_add(VAL_SEED_OFFSET));
        let (mnist, validation) = if cfg.task == TaskKind::MnistPixel {
            let (ti, tl) = mnist_paths(cfg, true)?;
            let (vi, vl) = mnist_paths(cfg, false)?;
            let train = load_mnist(ti, tl)?;
            let test = load_mnist(vi, vl)?;
            let n = cfg.eval_batch().min(test.len());
            let idx: Vec<usize> = (0..n).collect();
            let val = pixel_batch(&test, &idx, &mut val_rng, cfg.noise_var)?;
            (Some(train), val)
        } else {
            (None, synthetic(cfg.task, cfg.t, cfg.eval_batch(), &mut val_rng)?)
        };
        Ok(DataSource {
            task: cfg.task,
            t: cfg.t,
            batch: cfg.batch,
            rng: Rng::new(cfg.seed.wrapping_add(DATA_SEED_OFFSET)),
            noise_var: cfg.noise_var,
            mnist,
            validation,
        })
    }

    pub fn next_batch(&mut self) -> Result<TaskBatch> {
        match &self.mnist {
            Some(set) => {
                let idx: Vec<usize> = (0..self.batch).map(|_| self.rng.below(set.len())).collect();
                pixel_batch(set, &idx, &mut self.rng, self.noise_var)
            }
            None => synthetic(self.task, self.t, self.batch, &mut self.rng),
        }
    }
}

/// Loss and accuracy of `model` on `batch`, without gradients.
pub fn evaluate(model: &LstmModel, batch: &TaskBatch) -> Result<(f64, Option<f64>)> {
    let outs = predict(model, &batch.inputs, batch.meta.task.schedule())?;
    let ev = batch.evaluate(&outs)?;
    Ok((ev.loss, ev.accuracy()))
}

struct MetricsSink {
    writer: Option<csv::Writer<File>>,
}

impl MetricsSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let writer = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                }
                let mut w = csv::WriterBuilder::new().has_headers(false).from_path(p)?;
                w.write_record(MetricsRow::HEADER)?;
                w.flush().map_err(|e| Error::io("writing metrics", e))?;
                Some(w)
            }
            None => None,
        };
        Ok(MetricsSink { writer })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(row)?;
            w.flush().map_err(|e| Error::io("writing metrics", e))?;
        }
        Ok(())
    }
}

/// Trains per `cfg`, writing `metrics.csv` under `cfg.output_dir` if set.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let path = cfg.output_dir.as_ref().map(|d| d.join("metrics.csv"));
    run_training_to(cfg, path.as_deref())
}

/// Trains per `cfg`, writing metrics rows to `metrics_path` if given.
///
/// A row is emitted every `eval_every` iterations and after the last one.
/// With zero iterations only the header is written and the returned row
/// holds the initial validation loss in both loss columns.
pub fn run_training_to(cfg: &TrainConfig, metrics_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let wall = |s: &Instant| {
        if cfg.record_wall_time {
            s.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let mut model = build_model(cfg)?;
    let mut data = DataSource::new(cfg)?;
    let mut opt = Optimizer::new(OptimizerConfig::with_kind(cfg.optimizer, cfg.lr))?;
    let mut sink = MetricsSink::open(metrics_path)?;
    let schedule = cfg.task.schedule();

    let (val0, acc0) = evaluate(&model, &data.validation)?;
    let mut final_row = MetricsRow {
        iteration: 0,
        train_loss: val0,
        val_loss: val0,
        val_accuracy: acc0,
        wall_time: wall(&start),
        grad_norm: 0.0,
    };
    let mut rows = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for it in 1..=cfg.iterations {
        let batch = data.next_batch()?;
        let (outs, tape) = forward_sequence(&model, &batch.inputs, schedule)?;
        let ev = batch.evaluate(&outs)?;
        if !ev.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                loss: ev.loss,
            });
        }
        let mut grads = backward_sequence(&model, &tape, &ev.d_outputs)?;
        let grad_norm = if cfg.clip_norm > 0.0 {
            let mut gs: Vec<_> = grads.groups_mut(&model).into_iter().map(|(_, g)| g).collect();
            clip_global_norm(&mut gs, cfg.clip_norm)?
        } else {
            let gs: Vec<_> = grads.groups(&model).into_iter().map(|(_, g)| g).collect();
            global_norm(&gs)
        };
        let gs: Vec<_> = grads.groups(&model).into_iter().map(|(_, g)| g).collect();
        let mut ps: Vec<_> = model.param_groups_mut().into_iter().map(|(_, p)| p).collect();
        opt.step(&mut ps, &gs)?;

        loss_sum += ev.loss;
        loss_count += 1;
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let (val_loss, val_accuracy) = evaluate(&model, &data.validation)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    loss: val_loss,
                });
            }
            final_row = MetricsRow {
                iteration: it,
                train_loss: loss_sum / loss_count as f64,
                val_loss,
                val_accuracy,
                wall_time: wall(&start),
                grad_norm,
            };
            sink.push(&final_row)?;
            rows.push(final_row.clone());
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainOutcome { rows, final_row, model })
}
