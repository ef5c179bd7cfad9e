//! CLI errors and their process exit codes.

use specdec_core::Error;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for usage and configuration errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures while running a valid command.
pub const EXIT_RUNTIME: i32 = 2;
/// Exit code for a failed statistical audit.
pub const EXIT_AUDIT: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("lossless audit failed: worst TVD {tvd:.5}, min p-value {p_value:.3e}")]
    AuditFailed { tvd: f64, p_value: f64 },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            CliError::AuditFailed { .. } => EXIT_AUDIT,
            CliError::Core(e) => match e {
                Error::Usage(_) | Error::Validation(_) | Error::Parse { .. } | Error::Json(_) => EXIT_USAGE,
                Error::Dimension(_)
                | Error::Capacity(_)
                | Error::Divergence(_)
                | Error::Format(_)
                | Error::Io { .. } => EXIT_RUNTIME,
            },
        }
    }
}
