use std::path::PathBuf;

use thiserror::Error;

use crate::bspline::Domain;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("domain mismatch: expected {expected} template, got {actual}")]
    DomainMismatch { expected: Domain, actual: Domain },

    #[error("orientation grid mismatch: template has {template} layers, score has {score}")]
    GridMismatch { template: usize, score: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("linear system is singular or not positive definite (pivot {pivot} at row {row})")]
    Singular { row: usize, pivot: f64 },

    #[error("input of size {image:?} is smaller than kernel of size {kernel:?}")]
    TooSmall { image: Vec<usize>, kernel: Vec<usize> },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty region of interest")]
    EmptyRoi,

    #[error("missing detection for record {0}")]
    MissingDetection(String),

    #[error("template file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}
