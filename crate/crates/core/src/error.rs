use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A text file could not be parsed; `line` is 1-based.
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE are supported)")]
    UnsupportedCameraModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient candidates: requested {requested}, only {achievable} achievable")]
    InsufficientCandidates { requested: usize, achievable: usize },

    #[error("invalid partition: cannot split {landmarks} landmarks into {groups} groups")]
    InvalidPartition { groups: usize, landmarks: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("no consensus: {0}")]
    NoConsensus(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("landmark {0} appears in more than one detection set")]
    DuplicateLandmark(u32),

    #[error("unknown landmark id {0}")]
    UnknownLandmark(u32),

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// True for failures of a numerical procedure rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Degenerate(_) | Error::NoConsensus(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
