//! Experiment configuration, training loop, gradient checking,
//! normalization statistics and the `atn` command line.

pub mod cli;
mod config;
pub mod gradcheck;
pub mod ksweep;
pub mod reference;
pub mod stats;
pub mod train;

pub use config::TrainConfig;
pub use gradcheck::{run_gradcheck, GradcheckReport, GradcheckSpec};
pub use ksweep::run_ksweep;
pub use stats::{run_stats, StatsRecord};
pub use train::{run_training, MetricsRow, TrainOutcome};
