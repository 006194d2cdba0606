//! Library side of the `negcut` command: configuration handling and the
//! `train`, `eval`, `visualize` and `ablate` subcommands.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_ablate, cmd_eval, cmd_train, cmd_visualize, AblationRow, EvalRecord, VisualizeArgs};
pub use config::{load_config, ExperimentConfig};
pub use error::{CliError, CliResult};
