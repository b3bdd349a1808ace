//! The `fwl` command-line toolkit.
//!
//! [`config`] holds the single TOML pipeline configuration and its
//! validation, [`cache`] the content-addressed stage store, [`pipeline`] the
//! staged synth / pretrain / finetune / eval run, and [`cmd`] the individual
//! subcommands.

pub mod cache;
pub mod cmd;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{validate_config, Diagnostic, PipelineConfig, Stage};
pub use error::{CliError, Result};
pub use pipeline::{run_pipeline, Report};
