use std::fmt;

use ntc_core::NtcError;

/// Failure of a CLI run, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unparseable or invalid configuration, missing input files.
    Config(String),
    /// Divergence, non-finite values or solver failures.
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<NtcError> for CliError {
    fn from(e: NtcError) -> Self {
        let msg = e.to_string();
        match e {
            NtcError::Divergence { .. }
            | NtcError::NonFinite { .. }
            | NtcError::NoConvergence { .. }
            | NtcError::DegenerateCovariance { .. }
            | NtcError::SupportOverflow { .. } => CliError::Numeric(msg),
            NtcError::InvalidArgument(_) | NtcError::Dimension { .. } | NtcError::Domain { .. } => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
