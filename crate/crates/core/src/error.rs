use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape function failed at voxel {index}")]
    AtVoxel {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("curve parameter {value} outside [0, {max}]")]
    CurveParameterOutOfRange { value: f64, max: f64 },

    #[error("nearest centerline point could not be bracketed")]
    NearestPointNotBracketed,

    #[error("class index {0} is not 0 (background) or 1 (foreground)")]
    InvalidClass(usize),

    #[error("both class densities vanish at voxel {0}")]
    DegeneratePosterior(usize),

    #[error("matrix is not positive definite{}", .index.map(|i| format!(" (input {i})")).unwrap_or_default())]
    NotPositiveDefinite { index: Option<usize> },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("grid mismatch between volumes")]
    GridMismatch,

    #[error("mask is empty")]
    EmptyMask,

    #[error("fit diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Volume(#[from] crate::io::VolumeError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
