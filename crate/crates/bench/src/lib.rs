//! Configuration, orchestration and metric emission around the `riskgrad`
//! controllers. The `riskgrad` binary is a thin front end over [`cli`].

pub mod cli;
pub mod config;
pub mod experiment;
pub mod metrics;

pub use config::{load_config, ConfigError, Experiment, ExperimentConfig, MethodConfig};
pub use metrics::{MetricsRecord, Format};
