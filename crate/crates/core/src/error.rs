use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("class `{0}` has no images")]
    EmptyClass(String),

    #[error("split infeasible: minority class has {minority} image(s), need at least 2")]
    SplitInfeasible { minority: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite loss at iteration {iteration} (epoch {epoch}): term `{term}` = {value}")]
    NonFiniteLoss {
        iteration: u64,
        epoch: usize,
        term: &'static str,
        value: f64,
    },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("stage `{stage}` failed in run {run}: {source}")]
    Stage {
        stage: &'static str,
        run: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::Range(_) => 2,
            Error::Numerical(_) | Error::NonFiniteLoss { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse { line: e.line() as u64, message: e.to_string() }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        Error::Parse { line, message: e.to_string() }
    }
}
