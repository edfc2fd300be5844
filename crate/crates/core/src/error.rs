use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value {value} at voxel {voxel}, contrast {contrast}")]
    NonFinite {
        voxel: usize,
        contrast: usize,
        value: f64,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("deformation energy is infinite (inverted or collapsed tetrahedron {tet})")]
    InfiniteEnergy { tet: usize },

    #[error("covariance of class {class} is not positive definite")]
    NotSpd { class: usize },

    #[error("class {class} has zero total responsibility")]
    EmptyClass { class: usize },

    #[error("degenerate voxels with zero posterior mass: {voxels:?}")]
    DegenerateVoxels { voxels: Vec<usize> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::InfiniteEnergy { .. }
                | Error::NotSpd { .. }
                | Error::EmptyClass { .. }
                | Error::DegenerateVoxels { .. }
                | Error::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
