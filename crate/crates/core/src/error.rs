use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate projection vector")]
    DegenerateProjection,

    #[error("non-invertible output map")]
    NonInvertibleOutputMap,

    #[error("point outside the constraint domain: {0}")]
    OutsideDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate bandwidth")]
    DegenerateBandwidth,

    #[error("non-finite value at outer iteration {outer}, inner iteration {inner}: {what}")]
    NonFinite {
        outer: usize,
        inner: usize,
        what: String,
    },

    #[error("training aborted at outer iteration {outer}, inner iteration {inner}")]
    Aborted {
        outer: usize,
        inner: usize,
        source: Box<Error>,
    },

    #[error(
        "gibbs fit did not converge after {iterations} iterations (moment mismatch {mismatch:e})"
    )]
    NoConvergence { iterations: usize, mismatch: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
