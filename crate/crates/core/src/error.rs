use thiserror::Error;

/// Errors raised by the tensor, convolution, fitting and analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("expected a {expected}-way tensor, got {got}-way")]
    RankMismatch { expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("rank {k} exceeds the maximum {max} for this kernel")]
    RankTooLarge { k: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fit diverged at iteration {iteration}: residual is not finite")]
    Divergence { iteration: usize },

    #[error("count error: {0}")]
    Count(String),

    #[error("layer {name}: {source}")]
    Layer { name: String, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;
