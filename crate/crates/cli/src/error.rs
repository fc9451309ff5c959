use std::fmt;

use attribank::autodiff::AutodiffError;
use attribank::data::DataError;
use attribank::trainer::TrainError;

/// Failure of a command, carrying its exit code class.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Exit 1: unreadable or invalid configuration, bad flag values.
    Config(String),
    /// Exit 2: missing, malformed or inconsistent input data, unwritable outputs.
    Data(String),
    /// Exit 3: non-finite values or a failed gradient check.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            return CliError::Numeric(msg);
        }
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::WrongMode { .. } | TrainError::Objective(_) => CliError::Config(msg),
            TrainError::Autodiff(AutodiffError::NonFinite(_)) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
