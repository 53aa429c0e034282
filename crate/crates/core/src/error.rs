use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid band [{low}, {high}] bpm for a signal sampled at {fps} Hz")]
    InvalidBand { low: f64, high: f64, fps: f64 },

    #[error("no spectral peak: signal carries no power in the analysis band")]
    NoPeak,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),

    #[error("heart rate label {bpm} bpm lies outside the analysis band [{low}, {high}]")]
    InvalidLabel { bpm: f64, low: f64, high: f64 },

    #[error("non-finite loss {value} ({context})")]
    NonFiniteLoss { value: f64, context: String },

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
