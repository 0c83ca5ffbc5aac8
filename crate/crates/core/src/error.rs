use std::path::PathBuf;

/// Errors produced anywhere in the modeling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid species id at line {line}")]
    InvalidSpecies { line: usize },

    #[error("coordinate ({lon}, {lat}) out of range at line {line}")]
    CoordinateOutOfRange { line: usize, lon: f64, lat: f64 },

    #[error("point ({lon}, {lat}) lies outside the grid bounds")]
    OutOfBounds { lon: f64, lat: f64 },

    #[error("species without any presence record: {0:?}")]
    MissingSpecies(Vec<usize>),

    #[error("full-weighted loss singular for species {species} (n_p(s) = n, weight {weight})")]
    SingularWeight { species: usize, weight: f64 },

    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("{0}")]
    Undefined(&'static str),

    #[error("species {0} has suitability below 1e-12 everywhere on the grid")]
    UnreachableNiche(usize),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 for rejected input or configuration, 2 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::InvalidSpecies { .. }
            | Error::CoordinateOutOfRange { .. }
            | Error::MissingSpecies(_)
            | Error::SingularWeight { .. }
            | Error::InvalidConfig { .. }
            | Error::Shape(_)
            | Error::Checkpoint(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Toml(_) => 1,
            _ => 2,
        }
    }
}
