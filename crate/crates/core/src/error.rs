//! Crate-wide error type.

/// Errors produced by tensor kernels, operators, solvers and file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced a non-finite value or otherwise failed numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The requested capability is not available on this object.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A binary or text input could not be decoded.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("solver did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    /// An iterate became non-finite; the partial trace is kept by the caller.
    #[error("solver diverged at iteration {iteration}")]
    SolverDiverged { iteration: usize },

    /// Configuration file or override rejected.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
