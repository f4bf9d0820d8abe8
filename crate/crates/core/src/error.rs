use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the segmentation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("nifti: {0}")]
    Nifti(#[from] NiftiError),

    #[error("{path}: nifti: {source}")]
    NiftiFile {
        path: PathBuf,
        #[source]
        source: NiftiError,
    },

    #[error("container format: {0}")]
    Format(String),

    #[error("incompatible format version: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failure modes specific to NIfTI-1 decoding.
#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("detached header/image pairs (magic \"ni1\") are not supported")]
    UnsupportedFormat,
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("expected a 3-dimensional volume, header declares {0} dimensions")]
    Dimensionality(i16),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("invalid header: {0}")]
    Header(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier of the error kind, used for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Degenerate(_) => "degenerate-input",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::NonFinite(_) => "non-finite",
            Error::Nifti(_) | Error::NiftiFile { .. } => "nifti",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Checksum(_) => "checksum",
            Error::Io { .. } => "io",
        }
    }
}
