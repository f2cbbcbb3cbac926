//! Configuration-driven experiment runner, artifact writer and CLI.

pub mod cli;
pub mod config;
pub mod output;
pub mod runner;
pub mod selftest;

pub use cli::{cli_main, report};
pub use config::{
    set_dotted, BaselineConfig, OptimizerConfig, OptimizerKind, RunConfig, SuiteConfig, TrainingConfig,
};
pub use output::{emit_outputs, manifest, read_metrics, MetricEntry};
pub use runner::{
    combiner_seed, run_experiment, run_experiment_with, teleport_seed, MetricRow, RunFailure, RunRecord, StepObserver,
    StepRow, TeleportRow,
};
