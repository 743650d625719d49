use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cells::NormMode;
use crate::error::{Error, Result};
use crate::harness::gradcheck::{run_gradcheck, GradcheckSpec, Stencil};
use crate::harness::ksweep::{ksweep_file, run_ksweep};
use crate::harness::stats::{mean_spread, run_stats, write_stats, SITES};
use crate::harness::train::run_training;
use crate::harness::TrainConfig;
use crate::numkit::Rng;
use crate::tasks::{gen_add, gen_copy, gen_denoise, TaskKind};

#[derive(Debug, Parser)]
#[command(name = "atn", version, about = "Recurrent networks with assorted-time normalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.csv
    Train(ConfigArgs),
    /// Check analytic gradients against central differences
    Gradcheck(GradcheckArgs),
    /// Record post-normalization statistics and write stats.json
    Stats(ConfigArgs),
    /// Train one ATN model per window length
    Ksweep(KsweepArgs),
    /// Generate one task batch and dump it as JSON
    GenTask(GenTaskArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed (overrides the config)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Apply the config's [quick] preset
    #[arg(long)]
    pub quick: bool,
    /// Override any config key, e.g. --set lr=1e-3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub mode: Option<NormMode>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct KsweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Window lengths, comma separated (overrides k_list)
    #[arg(long, value_delimiter = ',')]
    pub k_list: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "atn")]
    pub mode: NormMode,
    /// Hidden width
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Input width
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long = "T", default_value_t = 10)]
    pub t: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long)]
    pub stop_window_gradient: bool,
    #[arg(long)]
    pub bias_inside_norm: bool,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Central-difference formula: 3 or 5 points
    #[arg(long, default_value = "5")]
    pub stencil: Stencil,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenTaskArgs {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long = "T")]
    pub t: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[command(flatten)]
    pub common: Common,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| Error::io(format!("reading config {}", self.config.display()), e))?;
        let mut cfg = TrainConfig::parse(&text, self.quick, &self.overrides)?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(t) = self.t {
            cfg.t = t;
        }
        if let Some(i) = self.iterations {
            cfg.iterations = i;
        }
        if let Some(s) = self.common.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.common.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &TrainConfig) -> PathBuf {
        cfg.output_dir.clone().unwrap_or_else(|| {
            let stem = self
                .config
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            Path::new("runs").join(stem)
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_err(out: &mut dyn Write, e: std::io::Error) -> Error {
    let _ = out.flush();
    Error::io("writing output", e)
}

fn train(args: &ConfigArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = args.resolve()?;
    let dir = args.out_dir(&cfg);
    ensure_dir(&dir)?;
    cfg.output_dir = Some(dir.clone());
    let text = toml::to_string(&cfg).map_err(|e| Error::config("<config>", e.to_string()))?;
    std::fs::write(dir.join("config.toml"), text).map_err(|e| Error::io("writing config.toml", e))?;
    let outcome = run_training(&cfg)?;
    let r = &outcome.final_row;
    writeln!(
        out,
        "iteration {} train_loss {:.6} val_loss {:.6}{} -> {}",
        r.iteration,
        r.train_loss,
        r.val_loss,
        r.val_accuracy
            .map(|a| format!(" val_accuracy {a:.4}"))
            .unwrap_or_default(),
        dir.join("metrics.csv").display()
    )
    .map_err(|e| write_err(out, e))?;
    Ok(0)
}

fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = GradcheckSpec {
        mode: args.mode,
        n: args.n,
        d: args.d,
        k: args.k,
        t: args.t,
        batch: args.batch,
        seed: args.common.seed.unwrap_or(0),
        stop_window_gradient: args.stop_window_gradient,
        bias_inside_norm: args.bias_inside_norm,
        h: args.h,
        stencil: args.stencil,
        ..GradcheckSpec::default()
    };
    let report = run_gradcheck(&spec)?;
    if let Some(dir) = &args.common.out {
        ensure_dir(dir)?;
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(dir.join("gradcheck.json"), text).map_err(|e| Error::io("writing gradcheck.json", e))?;
    }
    writeln!(out, "{report}").map_err(|e| write_err(out, e))?;
    Ok(if report.passed() { 0 } else { 1 })
}

fn stats(args: &ConfigArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = args.resolve()?;
    let records = run_stats(&cfg)?;
    let dir = args.out_dir(&cfg);
    let path = dir.join("stats.json");
    write_stats(&path, &records)?;
    for site in SITES {
        writeln!(
            out,
            "{site:<4} std of per-step means {:.4e}",
            mean_spread(&records, site)
        )
        .map_err(|e| write_err(out, e))?;
    }
    writeln!(out, "{} records -> {}", records.len(), path.display()).map_err(|e| write_err(out, e))?;
    Ok(0)
}

fn ksweep(args: &KsweepArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = args.config.resolve()?;
    if !args.k_list.is_empty() {
        cfg.k_list = args.k_list.clone();
    }
    let dir = args.config.out_dir(&cfg);
    ensure_dir(&dir)?;
    let results = run_ksweep(&cfg, &cfg.k_list, Some(&dir))?;
    for (k, o) in &results {
        writeln!(
            out,
            "k={k:<4} final train_loss {:.6} val_loss {:.6} -> {}",
            o.final_row.train_loss,
            o.final_row.val_loss,
            dir.join(ksweep_file(*k)).display()
        )
        .map_err(|e| write_err(out, e))?;
    }
    Ok(0)
}

fn gen_task(args: &GenTaskArgs, out: &mut dyn Write) -> Result<i32> {
    let mut rng = Rng::new(args.common.seed.unwrap_or(0));
    let batch = match args.task {
        TaskKind::Copy => gen_copy(args.t, args.batch, &mut rng)?,
        TaskKind::Add => gen_add(args.t, args.batch, &mut rng)?,
        TaskKind::Denoise => gen_denoise(args.t, args.batch, &mut rng)?,
        TaskKind::MnistPixel => {
            return Err(Error::InvalidArgument(
                "gen-task covers the synthetic tasks; mnist-pixel batches come from IDX files".into(),
            ))
        }
    };
    let mut text = serde_json::to_string(&batch)?;
    text.push('\n');
    match &args.common.out {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = dir.join("batch.json");
            std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            writeln!(
                out,
                "{} steps x {} sequences -> {}",
                batch.steps(),
                args.batch,
                path.display()
            )
            .map_err(|e| write_err(out, e))?;
        }
        None => out.write_all(text.as_bytes()).map_err(|e| write_err(out, e))?,
    }
    Ok(0)
}

/// Runs a parsed command, returning the process exit code.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => train(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Stats(a) => stats(a, out),
        Command::Ksweep(a) => ksweep(a, out),
        Command::GenTask(a) => gen_task(a, out),
    }
}

/// Full command-line entry point: parses `argv`, runs, reports errors on
/// stderr and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
