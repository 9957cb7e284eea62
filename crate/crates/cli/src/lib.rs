//! Command-line driver: experiment configs, run directories and the five
//! verbs `gen`, `train`, `eval`, `render` and `report`.

pub mod config;
pub mod run;

pub use config::{ConfigError, ExperimentConfig};
pub use run::{CliError, EvalSource, Regime, RenderTarget, RunManifest, TrainOptions, TrainOutcome, Workspace};
