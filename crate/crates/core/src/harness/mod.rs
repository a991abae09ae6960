//! Command-line front end: configuration, training, evaluation, spread
//! inspection and the invariant suite.

pub mod check;
pub mod commands;
pub mod config;

pub use check::{cmd_check, run_checks, CheckKind, CheckOptions, CheckReport, CheckResult};
pub use commands::{
    builtin_inventory, cmd_evaluate, cmd_spreads, cmd_train_ac, cmd_train_pi, compare_spreads, resolve_inventory,
    EvaluationSummary, LoadedPolicy, PolicySource, SpreadComparison, SpreadReport,
};
pub use config::{load_config, AlgoConfig, ExperimentConfig, NetConfig};
