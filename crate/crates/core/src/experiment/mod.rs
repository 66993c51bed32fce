//! Configured learning experiments: trials, learning curves and CSV output.

pub mod config;
pub mod csv;
pub mod runner;

pub use config::{parse_config, ConfigError, Domain, EvalStarts, ExperimentConfig, Method};
pub use runner::{run_experiment, ExperimentError, ExperimentResult, LearningCurve};
