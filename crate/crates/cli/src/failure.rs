use std::fmt;
use std::path::Path;

use clasp::data::DataError;
use clasp::eval::CsvError;
use clasp::model::ConfigError;
use clasp::train::TrainError;
use clasp::TensorError;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or missing inputs (exit 2).
    Usage(String),
    /// Unreadable or inconsistent data (exit 3).
    Data(String),
    /// Non-finite loss or gradient (exit 4).
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return Failure::Numeric(e.to_string());
        }
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Data(d) => d.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<CsvError> for Failure {
    fn from(e: CsvError) -> Self {
        Failure::Data(e.to_string())
    }
}

/// Wraps an I/O error with the path it concerns.
pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

/// Input files named on the command line must exist.
pub fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}
