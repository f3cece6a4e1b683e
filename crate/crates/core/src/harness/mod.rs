//! Configuration, file formats, self-check suites and the command line.

pub mod cli;
pub mod config;
pub mod io;
pub mod suites;

pub use cli::{main_with_args, run, Cli};
pub use config::{ExperimentConfig, PriorSpec, TaskSpec};
pub use io::{load_checkpoint, read_samples, save_checkpoint, write_metrics_csv, write_samples, SampleIndex};
