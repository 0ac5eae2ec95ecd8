use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// A patch lookup left the input under `Valid` padding, which means the
    /// architecture was assembled with inconsistent extents.
    #[error("patch index {index:?} out of bounds for extent {extent:?} under valid padding")]
    ValidOutOfRange { index: Vec<i64>, extent: Vec<usize> },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e}, tolerance {tolerance:e})")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("diagonal propagation requires a diagonal weight covariance")]
    NotDiagonal,

    #[error("offset {0:?} is not stored in the banded moment")]
    MissingOffset(Vec<i64>),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("kernel evaluation failed for pair ({i}, {j}): {source}")]
    Pair {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("linear system is singular for noise variance {0:e}")]
    Singular(f64),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("fold configuration invalid: {0}")]
    Folds(String),

    #[error("bad magic bytes {0:?}")]
    Magic([u8; 4]),

    #[error("unsupported kernel file version {0}")]
    Version(u32),

    #[error("dataset digest mismatch: file has {found:#018x}, expected {expected:#018x}")]
    Digest { found: u64, expected: u64 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("not enough records: class {class} has {available}, need {needed}")]
    InsufficientRecords {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("no CIFAR-10 batch files found under {0}")]
    NoBatches(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors that come from reading or writing files rather than
    /// from the numerical contract.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Magic(_)
                | Error::Version(_)
                | Error::Digest { .. }
                | Error::Truncated(_)
                | Error::NoBatches(_)
                | Error::InsufficientRecords { .. }
        )
    }
}
