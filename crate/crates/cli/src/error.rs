use fwl_core::FwlError;
use fwl_nn::NnError;

use crate::config::Diagnostic;

/// Failure of a command; the process exit code follows the variant.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("invalid configuration:\n{}", format_diagnostics(.0))]
    Diagnostics(Vec<Diagnostic>),

    #[error("{0}")]
    Runtime(String),

    #[error("stage `{stage}` failed (inputs {}): {source}", inputs.join(", "))]
    Stage {
        stage: String,
        inputs: Vec<String>,
        source: Box<CliError>,
    },
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Diagnostics(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<FwlError> for CliError {
    fn from(e: FwlError) -> Self {
        match e {
            FwlError::Config { .. } => CliError::Config(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Config(_) | NnError::Core(FwlError::Config { .. }) => CliError::Config(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
