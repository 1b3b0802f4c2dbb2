use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Position of a parse failure inside an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Byte(u64),
    Unknown,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Byte(n) => write!(f, "byte {n}"),
            Location::Unknown => write!(f, "unknown position"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("grid has no instance-labeled cells")]
    NoGroundTruth,

    #[error("could not place object {object} after {attempts} attempts")]
    PackingFailed { object: usize, attempts: usize },

    #[error("voxel {0} is not covered by any ground-truth instance")]
    Coverage(usize),

    #[error("label {label} out of range for {classes} classes (voxel {voxel})")]
    Label { voxel: usize, label: u32, classes: usize },

    #[error("non-positive covariance {value} for instance {instance}")]
    Covariance { instance: usize, value: f64 },

    #[error("misaligned {what}: expected {expected}, got {actual}")]
    Alignment {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("IoU undefined for two empty instances")]
    EmptyInstance,

    #[error("{}: parse error at {location}: {message}", path.display())]
    Parse {
        path: PathBuf,
        location: Location,
        message: String,
    },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
